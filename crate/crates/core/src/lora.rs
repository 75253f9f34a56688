//! A single low-rank expert: `ΔW x = (α / r) · B A x`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{gaussian_init, join_name, rng_for, Matrix, ParamGroup, Parameter, Parameterized};

#[derive(Debug, Clone)]
struct ExpertCache {
    /// Input after dropout, T×k.
    input: Matrix,
    /// Dropout multipliers (0 or 1/(1−rate)), present only when dropout fired.
    mask: Option<Matrix>,
    /// `input · Aᵀ`, T×r.
    projected: Matrix,
}

#[derive(Debug, Clone)]
pub struct LoraExpert {
    /// r×k, Gaussian at init.
    pub a: Parameter,
    /// d×r, zero at init.
    pub b: Parameter,
    rank: usize,
    alpha: f64,
    dropout_rate: f64,
    training: bool,
    rng: ChaCha8Rng,
    cache: Option<ExpertCache>,
}

impl LoraExpert {
    /// Builds an expert for a `d×k` base weight. `A ~ N(0, 1/k)`, `B = 0`.
    pub fn new(d: usize, k: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 || rank > d.min(k) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must lie in [1, min({d}, {k})]"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {alpha}")));
        }
        let a = gaussian_init(rank, k, 1.0 / (k as f64).sqrt(), seed, "lora.a")?;
        Ok(Self {
            a: Parameter::new(a, ParamGroup::Adapter),
            b: Parameter::new(Matrix::zeros(d, rank), ParamGroup::Adapter),
            rank,
            alpha,
            dropout_rate: 0.0,
            training: false,
            rng: rng_for(seed, "lora.dropout"),
            cache: None,
        })
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn in_features(&self) -> usize {
        self.a.value.cols()
    }

    pub fn out_features(&self) -> usize {
        self.b.value.rows()
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_features() {
            return Err(Error::shape(
                "expert_forward",
                format!("{} input features", self.in_features()),
                format!("{}", x.cols()),
            ));
        }
        Ok(())
    }

    /// Inference path over T rows of input; no dropout, nothing cached.
    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let projected = x.matmul_nt(&self.a.value)?;
        Ok(projected.matmul_nt(&self.b.value)?.scale(self.scale()))
    }

    /// Training-capable forward over T rows (T×k → T×d). Caches what
    /// [`LoraExpert::backward`] needs.
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let (input, mask) = if self.training && self.dropout_rate > 0.0 {
            let keep = 1.0 / (1.0 - self.dropout_rate);
            let mut mask = Matrix::zeros(x.rows(), x.cols());
            for v in mask.data_mut() {
                if self.rng.gen::<f64>() >= self.dropout_rate {
                    *v = keep;
                }
            }
            (x.hadamard(&mask)?, Some(mask))
        } else {
            (x.clone(), None)
        };
        let projected = input.matmul_nt(&self.a.value)?;
        let out = projected.matmul_nt(&self.b.value)?.scale(self.scale());
        self.cache = Some(ExpertCache {
            input,
            mask,
            projected,
        });
        Ok(out)
    }

    /// Accumulates `grad_B += s·Gᵀ(XAᵀ)`, `grad_A += s·(G B)ᵀ X` and returns
    /// `grad_X = s·G B A`, with `s = α/r`.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("expert backward called before forward".into()))?;
        if upstream.shape() != (cache.input.rows(), self.out_features()) {
            return Err(Error::shape(
                "expert_backward",
                format!("{}x{}", cache.input.rows(), self.out_features()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let s = self.scale();
        let grad_b = upstream.matmul_tn(&cache.projected)?.scale(s);
        let grad_projected = upstream.matmul(&self.b.value)?.scale(s);
        let grad_a = grad_projected.matmul_tn(&cache.input)?;
        let mut grad_x = grad_projected.matmul(&self.a.value)?;
        if let Some(mask) = &cache.mask {
            grad_x = grad_x.hadamard(mask)?;
        }
        self.b.accumulate(&grad_b)?;
        self.a.accumulate(&grad_a)?;
        Ok(grad_x)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Parameterized for LoraExpert {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join_name(prefix, "a"), &self.a);
        f(&join_name(prefix, "b"), &self.b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join_name(prefix, "a"), &mut self.a);
        f(&join_name(prefix, "b"), &mut self.b);
    }
}
