//! Shot-level sampling under time-varying noise.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{self, c, CMatrix};
use crate::liouville::{self, DensityVector, Kind, Observable, SuperOperator};
use crate::pauli;

pub const CLAMP_TOL: f64 = 1e-9;
pub const REJECT_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum DriftSegment {
    Constant {
        shots: u64,
        params: Vec<f64>,
    },
    /// Linear interpolation from `from` to `to` across the segment.
    Ramp {
        shots: u64,
        from: Vec<f64>,
        to: Vec<f64>,
    },
}

impl DriftSegment {
    fn shots(&self) -> u64 {
        match self {
            DriftSegment::Constant { shots, .. } | DriftSegment::Ramp { shots, .. } => *shots,
        }
    }
}

/// Noise parameters as a function of the global shot index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub label: String,
    pub segments: Vec<DriftSegment>,
}

impl DriftSchedule {
    pub fn constant(total: u64, params: Vec<f64>) -> Self {
        DriftSchedule {
            label: "constant".into(),
            segments: vec![DriftSegment::Constant {
                shots: total,
                params,
            }],
        }
    }

    /// `a` for the first `switch_at` shots, `b` afterwards.
    pub fn abrupt(total: u64, switch_at: u64, a: Vec<f64>, b: Vec<f64>) -> Self {
        DriftSchedule {
            label: "abrupt".into(),
            segments: vec![
                DriftSegment::Constant {
                    shots: switch_at,
                    params: a,
                },
                DriftSegment::Constant {
                    shots: total - switch_at,
                    params: b,
                },
            ],
        }
    }

    pub fn ramp(total: u64, from: Vec<f64>, to: Vec<f64>) -> Self {
        DriftSchedule {
            label: "ramp".into(),
            segments: vec![DriftSegment::Ramp {
                shots: total,
                from,
                to,
            }],
        }
    }

    pub fn total_shots(&self) -> u64 {
        self.segments.iter().map(DriftSegment::shots).sum()
    }

    pub fn params_at(&self, shot: u64) -> Result<Vec<f64>> {
        let mut start = 0;
        for seg in &self.segments {
            let n = seg.shots();
            if shot < start + n {
                return Ok(match seg {
                    DriftSegment::Constant { params, .. } => params.clone(),
                    DriftSegment::Ramp { from, to, .. } => {
                        let t = if n <= 1 {
                            0.0
                        } else {
                            (shot - start) as f64 / (n - 1) as f64
                        };
                        from.iter().zip(to).map(|(a, b)| a + (b - a) * t).collect()
                    }
                });
            }
            start += n;
        }
        Err(Error::Coverage {
            covered: start,
            needed: shot + 1,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Hopping,
    Sequential,
}

impl Policy {
    pub fn label(&self) -> &'static str {
        match self {
            Policy::Hopping => "hopping",
            Policy::Sequential => "sequential",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub policy: Policy,
    pub n_hop: u64,
    pub rounds: u64,
    pub levels: Vec<u32>,
    pub seed: u64,
}

impl ExecutionPlan {
    pub fn total_shots(&self) -> u64 {
        self.n_hop * self.rounds * self.levels.len() as u64
    }

    /// Time-ordered index of shot `s` of level slot `i` in round `r`.
    pub fn global_index(&self, r: u64, i: usize, s: u64) -> u64 {
        let nlev = self.levels.len() as u64;
        match self.policy {
            Policy::Hopping => (r * nlev + i as u64) * self.n_hop + s,
            Policy::Sequential => (i as u64 * self.rounds + r) * self.n_hop + s,
        }
    }

    fn stream(&self, r: u64, i: usize) -> u64 {
        let tag = match self.policy {
            Policy::Hopping => 1u64,
            Policy::Sequential => 2u64,
        };
        (tag << 56) | (r << 16) | i as u64
    }

    /// Generator for one (round, level) block, independent of execution order
    /// within the policy.
    pub fn block_rng(&self, r: u64, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream(r, i));
        rng
    }
}

/// Survival probability of a circuit family at amplification level `j` under
/// noise parameters `params`.
pub trait ShotFamily: Sync {
    fn probability(&self, level: u32, params: &[f64]) -> Result<f64>;
}

/// Checks and clamps a Bernoulli probability.
pub fn checked_probability(p: f64) -> Result<f64> {
    if !p.is_finite() || p < -REJECT_TOL || p > 1.0 + REJECT_TOL {
        return Err(Error::ChannelInconsistency { p });
    }
    Ok(p.clamp(0.0, 1.0))
}

/// One Bernoulli draw of a projector measurement.
pub fn sample_shot(
    channel: &SuperOperator,
    a: &Observable,
    rho0: &DensityVector,
    rng: &mut impl Rng,
) -> Result<bool> {
    if !a.is_projector() {
        return Err(Error::Structural(
            "shot sampling needs a projector observable".into(),
        ));
    }
    let p = checked_probability(liouville::expectation(a, channel, rho0)?)?;
    Ok(rng.gen::<f64>() < p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub policy: Policy,
    pub order: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub per_round: Vec<f64>,
    pub n_hop: u64,
    pub rounds: u64,
    pub seed: u64,
}

struct ProbabilityCache<'a, F: ShotFamily> {
    family: &'a F,
    memo: Mutex<HashMap<(u32, Vec<u64>), f64>>,
}

impl<'a, F: ShotFamily> ProbabilityCache<'a, F> {
    fn get(&self, level: u32, params: &[f64]) -> Result<f64> {
        let key = (
            level,
            params.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        );
        if let Some(p) = self.memo.lock().expect("cache lock").get(&key) {
            return Ok(*p);
        }
        let p = checked_probability(self.family.probability(level, params)?)?;
        self.memo.lock().expect("cache lock").insert(key, p);
        Ok(p)
    }
}

/// Runs a plan and combines the per-round level averages with the weights.
pub fn run_plan<F: ShotFamily>(
    family: &F,
    drift: &DriftSchedule,
    plan: &ExecutionPlan,
    coeffs: &CoefficientSet,
) -> Result<PlanResult> {
    if plan.n_hop == 0 || plan.rounds == 0 || plan.levels.is_empty() {
        return Err(Error::config(
            "plan",
            "n_hop, rounds and levels must be non-empty",
        ));
    }
    if !coeffs.is_uniform() || coeffs.entries.len() != plan.levels.len() {
        return Err(Error::Structural(format!(
            "{} coefficients for {} levels",
            coeffs.entries.len(),
            plan.levels.len()
        )));
    }
    for (e, &lvl) in coeffs.entries.iter().zip(&plan.levels) {
        if e.amplification.level(0) != lvl {
            return Err(Error::Structural(format!(
                "coefficient level {} vs plan level {lvl}",
                e.amplification.label()
            )));
        }
    }
    let needed = plan.total_shots();
    if drift.total_shots() < needed {
        return Err(Error::Coverage {
            covered: drift.total_shots(),
            needed,
        });
    }
    let cache = ProbabilityCache {
        family,
        memo: Mutex::new(HashMap::new()),
    };
    let weights = coeffs.weights();
    let per_round = exec::par_map_range(plan.rounds as usize, |r| -> Result<f64> {
        let r = r as u64;
        let mut value = 0.0;
        for (i, &lvl) in plan.levels.iter().enumerate() {
            let mut rng = plan.block_rng(r, i);
            let mut hits = 0u64;
            for s in 0..plan.n_hop {
                let params = drift.params_at(plan.global_index(r, i, s))?;
                let p = cache.get(lvl, &params)?;
                if rng.gen::<f64>() < p {
                    hits += 1;
                }
            }
            value += weights[i] * hits as f64 / plan.n_hop as f64;
        }
        Ok(value)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let n = per_round.len() as f64;
    let estimate = per_round.iter().sum::<f64>() / n;
    let var = if per_round.len() > 1 {
        per_round
            .iter()
            .map(|v| (v - estimate).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    Ok(PlanResult {
        policy: plan.policy,
        order: coeffs.order,
        estimate,
        stderr: (var / n).sqrt(),
        per_round,
        n_hop: plan.n_hop,
        rounds: plan.rounds,
        seed: plan.seed,
    })
}

/// `N` over-rotated `R_xx(π/2)` gates on two qubits forming the identity,
/// with the twirled over-rotation modeled as a stochastic X⊗X error after
/// each gate. The single parameter is the over-rotation angle δ; the error
/// probability is `sin²(δ/2)`.
pub struct RxxTwirled {
    pub gates: usize,
    forward: CMatrix,
    inverse: CMatrix,
    flip: CMatrix,
    rho0: DensityVector,
    observable: Observable,
}

impl RxxTwirled {
    pub fn new(gates: usize) -> Result<Self> {
        let xx = pauli::pauli_string("XX")?;
        let u = linalg::expm(&(&xx * c(0.0, -std::f64::consts::FRAC_PI_4)))?;
        let forward = liouville::unitary_superop(&u)?.matrix;
        let inverse = liouville::unitary_superop(&u.adjoint())?.matrix;
        let flip = liouville::unitary_superop(&xx)?.matrix;
        let zero = pauli::product_state("00")?;
        Ok(RxxTwirled {
            gates,
            forward,
            inverse,
            flip,
            rho0: liouville::pure_state(&zero)?,
            observable: Observable::projector(&zero)?,
        })
    }

    pub fn error_probability(delta: f64) -> f64 {
        (delta / 2.0).sin().powi(2)
    }

    fn error_channel(&self, p: f64) -> CMatrix {
        let n = self.flip.nrows();
        linalg::identity(n) * c(1.0 - p, 0.0) + &self.flip * c(p, 0.0)
    }

    /// `K (K_I K)^j` for the whole gate sequence.
    pub fn channel(&self, level: u32, delta: f64) -> SuperOperator {
        let e = self.error_channel(Self::error_probability(delta));
        let fwd_gate = linalg::matmul(&e, &self.forward);
        let inv_gate = linalg::matmul(&e, &self.inverse);
        let k = linalg::matpow(&fwd_gate, self.gates as u32);
        let ki = linalg::matpow(&inv_gate, self.gates as u32);
        let m = linalg::matmul(&k, &linalg::matpow(&linalg::matmul(&ki, &k), level));
        SuperOperator::new(m, Kind::NoisyChannel)
    }

    pub fn observable(&self) -> &Observable {
        &self.observable
    }

    pub fn initial_state(&self) -> &DensityVector {
        &self.rho0
    }
}

impl ShotFamily for RxxTwirled {
    fn probability(&self, level: u32, params: &[f64]) -> Result<f64> {
        let delta = *params
            .first()
            .ok_or_else(|| Error::config("drift", "missing over-rotation parameter"))?;
        liouville::expectation(&self.observable, &self.channel(level, delta), &self.rho0)
    }
}

/// Family given by a closure returning the survival probability.
pub struct FnFamily<F: Fn(u32, &[f64]) -> Result<f64> + Sync>(pub F);

impl<F: Fn(u32, &[f64]) -> Result<f64> + Sync> ShotFamily for FnFamily<F> {
    fn probability(&self, level: u32, params: &[f64]) -> Result<f64> {
        (self.0)(level, params)
    }
}
