//! Additive white Gaussian noise on the client↔server links.
//!
//! Every client owns two independent noise streams, one per direction. A
//! stream is ChaCha8 keyed by the master channel seed, with the stream id
//! `2·client + direction` (uplink 0, downlink 1), feeding the trigonometric
//! Box–Muller transform: each pair of uniforms `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`
//! yields `r·cos θ` then `r·sin θ` with `r = √(−2 ln u1)`, `θ = 2π u2`.
//! Uniforms take the top 53 bits of a `u64` draw. Given the same
//! (seed, client, direction), the sequence is identical across runs and
//! platforms.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::model::ClientWeights;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

/// Seeded standard-normal source.
#[derive(Clone, Debug)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64, client: usize, direction: Direction) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir = match direction {
            Direction::Uplink => 0,
            Direction::Downlink => 1,
        };
        rng.set_stream(2 * client as u64 + dir);
        GaussianStream { rng, spare: None }
    }

    /// A stream keyed by an arbitrary id, for uses other than the channel.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        GaussianStream { rng, spare: None }
    }

    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_standard(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Which kind of data crosses the link.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload<T> {
    /// Activations: front-end → server (uplink) or server → back-end (downlink).
    Features(Tensor<T>, Direction),
    /// Gradients: back-end → server (uplink) or server → front-end (downlink).
    Gradients(Tensor<T>, Direction),
    /// A client's `{W^FE, W^BE}` after local training.
    ClientWeights(ClientWeights<T>),
    /// The averaged client weights broadcast by the server.
    GlobalClientWeights(ClientWeights<T>),
    /// The unreliability indicator `b_i`.
    Indicator(f64),
}

impl<T> Payload<T> {
    pub fn direction(&self) -> Direction {
        match self {
            Payload::Features(_, d) | Payload::Gradients(_, d) => *d,
            Payload::ClientWeights(_) | Payload::Indicator(_) => Direction::Uplink,
            Payload::GlobalClientWeights(_) => Direction::Downlink,
        }
    }
}

/// Per-client channel configuration and noise streams.
#[derive(Clone, Debug)]
pub struct ChannelState {
    pub client_id: usize,
    pub sigma_noise: f64,
    /// First global epoch (1-based) with noise; `None` for a clean link.
    pub onset_global_epoch: Option<u32>,
    uplink: GaussianStream,
    downlink: GaussianStream,
}

impl ChannelState {
    pub fn new(seed: u64, client_id: usize, sigma_noise: f64, onset_global_epoch: Option<u32>) -> Self {
        assert!(sigma_noise >= 0.0, "sigma_noise must be non-negative");
        ChannelState {
            client_id,
            sigma_noise,
            onset_global_epoch,
            uplink: GaussianStream::new(seed, client_id, Direction::Uplink),
            downlink: GaussianStream::new(seed, client_id, Direction::Downlink),
        }
    }

    pub fn clean(client_id: usize) -> Self {
        Self::new(0, client_id, 0.0, None)
    }

    pub fn noise_active(&self, global_epoch: u32) -> bool {
        matches!(self.onset_global_epoch, Some(onset) if global_epoch >= onset)
    }

    fn corrupts(&self, global_epoch: u32) -> bool {
        self.sigma_noise > 0.0 && self.noise_active(global_epoch)
    }

    fn stream(&mut self, d: Direction) -> &mut GaussianStream {
        match d {
            Direction::Uplink => &mut self.uplink,
            Direction::Downlink => &mut self.downlink,
        }
    }

    fn add_noise<'a, T: Scalar>(&mut self, d: Direction, values: impl Iterator<Item = &'a mut T>) {
        let sigma = self.sigma_noise;
        let s = self.stream(d);
        for v in values {
            *v += T::lit(sigma * s.next_standard());
        }
    }

    /// Sends a payload across the link at `global_epoch`.
    ///
    /// Inactive links return the payload untouched. Active links add one
    /// independent `N(0, σ²)` draw per element, in row-major order, from the
    /// stream of the payload's direction.
    pub fn transmit<T: Scalar>(&mut self, payload: Payload<T>, global_epoch: u32) -> Payload<T> {
        if !self.corrupts(global_epoch) {
            return payload;
        }
        let d = payload.direction();
        match payload {
            Payload::Features(mut t, dir) => {
                self.add_noise(d, t.data_mut().iter_mut());
                Payload::Features(t, dir)
            }
            Payload::Gradients(mut t, dir) => {
                self.add_noise(d, t.data_mut().iter_mut());
                Payload::Gradients(t, dir)
            }
            Payload::ClientWeights(mut w) => {
                self.add_noise(d, w.values_mut());
                Payload::ClientWeights(w)
            }
            Payload::GlobalClientWeights(mut w) => {
                self.add_noise(d, w.values_mut());
                Payload::GlobalClientWeights(w)
            }
            Payload::Indicator(b) => {
                let z = self.stream(d).next_standard();
                Payload::Indicator(b + self.sigma_noise * z)
            }
        }
    }

    /// Binds the channel to a global epoch for the activation/gradient hops of a split pass.
    pub fn link(&mut self, global_epoch: u32) -> ChannelLink<'_> {
        ChannelLink { channel: self, global_epoch }
    }
}

/// The four tensor hops of one split forward/backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hop {
    /// front-end activations to the server
    FeaturesUp,
    /// server activations to the back-end
    FeaturesDown,
    /// back-end input gradient to the server
    GradientsUp,
    /// server input gradient to the front-end
    GradientsDown,
}

/// Carrier of the tensors exchanged during split passes.
pub trait Link<T> {
    fn send(&mut self, hop: Hop, t: Tensor<T>) -> Tensor<T>;
}

/// A perfect link.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl<T> Link<T> for Identity {
    fn send(&mut self, _hop: Hop, t: Tensor<T>) -> Tensor<T> {
        t
    }
}

pub struct ChannelLink<'a> {
    channel: &'a mut ChannelState,
    global_epoch: u32,
}

impl<T: Scalar> Link<T> for ChannelLink<'_> {
    fn send(&mut self, hop: Hop, t: Tensor<T>) -> Tensor<T> {
        let payload = match hop {
            Hop::FeaturesUp => Payload::Features(t, Direction::Uplink),
            Hop::FeaturesDown => Payload::Features(t, Direction::Downlink),
            Hop::GradientsUp => Payload::Gradients(t, Direction::Uplink),
            Hop::GradientsDown => Payload::Gradients(t, Direction::Downlink),
        };
        match self.channel.transmit(payload, self.global_epoch) {
            Payload::Features(t, _) | Payload::Gradients(t, _) => t,
            _ => unreachable!("tensor payload kind is preserved by transmit"),
        }
    }
}

/// Default noise schedule: clients 3, 4 and 5
/// (1-based) turn noisy at global epochs 5, 4 and 3; everyone else stays clean.
pub fn default_onset(client_id: usize) -> Option<u32> {
    match client_id {
        3 => Some(5),
        4 => Some(4),
        5 => Some(3),
        _ => None,
    }
}
