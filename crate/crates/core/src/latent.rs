//! Gaussian machinery for the per-timestep latent variable: posterior
//! encoder, prior (learned or standard normal), the two state decoders,
//! reparameterized sampling, log-densities, and analytic KL.

use crate::error::{Error, Result};
use crate::nn::{Dense, LEAKY_SLOPE};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

const HALF_LN_2PI: f64 = 0.918938533204672741780329736406;

/// Diagonal Gaussian over a batch: `mu`, `sigma` both [batch x d], sigma
/// strictly positive.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl GaussianParams {
    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mu.shape()[1]
    }

    /// N(0, I) constants for a whole batch.
    pub fn standard(batch: usize, d: usize) -> Self {
        GaussianParams {
            mu: Tensor::zeros(&[batch, d]),
            sigma: Tensor::filled(&[batch, d], 1.0),
        }
    }
}

/// One-hidden-layer network with leaky-ReLU activation and two output heads
/// producing the mean and pre-sigma of a diagonal Gaussian.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub hidden: Dense,
    pub mu_head: Dense,
    pub sigma_head: Dense,
    pub sigma_min: f64,
}

impl MlpParams {
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, sigma_min: f64, rng: &mut Rng) -> Self {
        MlpParams {
            hidden: Dense::init(d_in, d_hidden, rng),
            mu_head: Dense::init(d_hidden, d_out, rng),
            sigma_head: Dense::init(d_hidden, d_out, rng),
            sigma_min,
        }
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize, sigma_min: f64) -> Self {
        MlpParams {
            hidden: Dense::zeros(d_in, d_hidden),
            mu_head: Dense::zeros(d_hidden, d_out),
            sigma_head: Dense::zeros(d_hidden, d_out),
            sigma_min,
        }
    }

    pub fn d_in(&self) -> usize {
        self.hidden.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.mu_head.d_out()
    }

    /// x [m x d_in] -> (mu, softplus(pre) + sigma_min).
    pub fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<GaussianParams> {
        let pre = self.hidden.apply(tape, x)?;
        let h = tape.leaky_relu(&pre, LEAKY_SLOPE)?;
        let mu = self.mu_head.apply(tape, &h)?;
        let pre_sigma = self.sigma_head.apply(tape, &h)?;
        let sp = tape.softplus(&pre_sigma)?;
        let sigma = tape.add_const(&sp, self.sigma_min)?;
        Ok(GaussianParams { mu, sigma })
    }

    pub fn bind(&self, tape: &mut Tape) -> Self {
        MlpParams {
            hidden: self.hidden.bind(tape),
            mu_head: self.mu_head.bind(tape),
            sigma_head: self.sigma_head.bind(tape),
            sigma_min: self.sigma_min,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.hidden.visit(&format!("{prefix}.hidden"), out);
        self.mu_head.visit(&format!("{prefix}.mu"), out);
        self.sigma_head.visit(&format!("{prefix}.sigma"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.hidden.visit_mut(&format!("{prefix}.hidden"), out);
        self.mu_head.visit_mut(&format!("{prefix}.mu"), out);
        self.sigma_head.visit_mut(&format!("{prefix}.sigma"), out);
    }
}

/// The latent prior: a network conditioned on the previous forward state, or
/// a standard Gaussian.
#[derive(Debug, Clone)]
pub enum Prior {
    Fixed,
    Learned(MlpParams),
}

impl Prior {
    pub fn bind(&self, tape: &mut Tape) -> Self {
        match self {
            Prior::Fixed => Prior::Fixed,
            Prior::Learned(mlp) => Prior::Learned(mlp.bind(tape)),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        if let Prior::Learned(mlp) = self {
            mlp.visit(prefix, out);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if let Prior::Learned(mlp) = self {
            mlp.visit_mut(prefix, out);
        }
    }
}

/// Posterior over z_t given the previous forward state and the backward
/// state, inputs concatenated along the feature axis.
pub fn encoder(
    tape: &mut Tape,
    phi: &MlpParams,
    h_prev: &Tensor,
    b_t: &Tensor,
) -> Result<GaussianParams> {
    let joint = tape.concat_cols(h_prev, b_t)?;
    phi.apply(tape, &joint)
}

/// Prior over z_t given the previous forward state.
pub fn prior(tape: &mut Tape, theta: &Prior, h_prev: &Tensor, d_z: usize) -> Result<GaussianParams> {
    match theta {
        Prior::Fixed => Ok(GaussianParams::standard(h_prev.shape()[0], d_z)),
        Prior::Learned(mlp) => mlp.apply(tape, h_prev),
    }
}

/// Decoder for the backward-state reconstruction target.
pub fn decode_b(tape: &mut Tape, psi: &MlpParams, z_t: &Tensor) -> Result<GaussianParams> {
    psi.apply(tape, z_t)
}

/// Decoder for the previous-forward-state reconstruction target.
pub fn decode_h(tape: &mut Tape, xi: &MlpParams, z_t: &Tensor) -> Result<GaussianParams> {
    xi.apply(tape, z_t)
}

/// mu + sigma (.) eps with eps drawn standard normal; gradients flow into mu
/// and sigma only.
pub fn reparam_sample(tape: &mut Tape, g: &GaussianParams, rng: &mut Rng) -> Result<Tensor> {
    let eps = Tensor::from_vec(rng.normal_vec(g.mu.numel()), g.mu.shape())?;
    reparam_with_eps(tape, g, &eps)
}

/// Reparameterization with caller-supplied noise; `eps` must be a constant.
pub fn reparam_with_eps(tape: &mut Tape, g: &GaussianParams, eps: &Tensor) -> Result<Tensor> {
    if eps.node().is_some() {
        return Err(Error::Domain("reparameterization noise must be a constant".into()));
    }
    let scaled = tape.mul(&g.sigma, eps)?;
    tape.add(&g.mu, &scaled)
}

/// Per-row log N(x | mu, diag sigma^2), summed over the feature axis.
pub fn log_density(tape: &mut Tape, g: &GaussianParams, x: &Tensor) -> Result<Tensor> {
    if x.shape() != g.mu.shape() {
        return Err(Error::shape(
            "log_density",
            format!("x {:?} vs mu {:?}", x.shape(), g.mu.shape()),
        ));
    }
    let diff = tape.sub(x, &g.mu)?;
    let sq = tape.square(&diff)?;
    let var = tape.square(&g.sigma)?;
    let var2 = tape.scale(&var, 2.0)?;
    let quad = tape.div(&sq, &var2)?;
    let log_sigma = tape.log(&g.sigma)?;
    let inner = tape.add(&log_sigma, &quad)?;
    let shifted = tape.add_const(&inner, HALF_LN_2PI)?;
    let per_elem = tape.neg(&shifted)?;
    tape.sum_axis(&per_elem, 1)
}

/// Analytic KL(q || p) between diagonal Gaussians, per batch row:
/// sum_d [ log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2 ].
pub fn kl_diag_gauss(tape: &mut Tape, q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    if q.mu.shape() != p.mu.shape() {
        return Err(Error::shape(
            "kl_diag_gauss",
            format!("q {:?} vs p {:?}", q.mu.shape(), p.mu.shape()),
        ));
    }
    let log_ratio = {
        let lp = tape.log(&p.sigma)?;
        let lq = tape.log(&q.sigma)?;
        tape.sub(&lp, &lq)?
    };
    let num = {
        let var_q = tape.square(&q.sigma)?;
        let mean_diff = tape.sub(&q.mu, &p.mu)?;
        let mean_sq = tape.square(&mean_diff)?;
        tape.add(&var_q, &mean_sq)?
    };
    let var_p = tape.square(&p.sigma)?;
    let den = tape.scale(&var_p, 2.0)?;
    let frac = tape.div(&num, &den)?;
    let inner = tape.add(&log_ratio, &frac)?;
    let per_elem = tape.add_const(&inner, -0.5)?;
    tape.sum_axis(&per_elem, 1)
}
