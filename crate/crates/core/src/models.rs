//! Score networks: an MLP for the first-order score and a
//! diagonal-plus-low-rank head `α(x̃) + β(x̃)β(x̃)ᵀ` for the second-order score.

use crate::autodiff::checkpoint;
use crate::autodiff::{Gradients, MlpParams, MlpVars, Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// `s̃₁(x̃; θ)`: an MLP from `ℝ^D` to `ℝ^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstOrderModel {
    pub net: MlpParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondOrderMode {
    Full,
    DiagOnly,
}

/// `s̃₂(x̃; θ) = diag(α(x̃)) + β(x̃) β(x̃)ᵀ` with `β` of shape `D x rank`.
/// In diag-only mode there is no `β` and only the diagonal is modeled.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrderModel {
    alpha: MlpParams,
    beta: Option<MlpParams>,
    rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModelPair {
    pub first: FirstOrderModel,
    pub second: SecondOrderModel,
    pub sigma_train: f64,
}

/// Architecture of a freshly initialized pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width of the first-order network.
    pub hidden_s1: usize,
    /// Hidden width of the α and β networks.
    pub hidden_s2: usize,
    /// Number of affine layers per network; 1 gives an affine model.
    pub layers: usize,
    /// Defaults to `min(20, D)`.
    pub rank: Option<usize>,
    pub mode: SecondOrderMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_s1: 128,
            hidden_s2: 32,
            layers: 3,
            rank: None,
            mode: SecondOrderMode::Full,
        }
    }
}

fn layer_sizes(input: usize, hidden: usize, output: usize, layers: usize) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(invalid("networks need at least one layer"));
    }
    let mut s = vec![input];
    s.extend(std::iter::repeat_n(hidden, layers - 1));
    s.push(output);
    Ok(s)
}

impl FirstOrderModel {
    pub fn new(net: MlpParams) -> Result<Self> {
        if net.in_dim() != net.out_dim() {
            return Err(shape_err(
                format!("output dim {}", net.in_dim()),
                net.out_dim(),
            ));
        }
        Ok(Self { net })
    }

    pub fn init(dim: usize, hidden: usize, layers: usize, seed: u64) -> Result<Self> {
        Self::new(MlpParams::init(&layer_sizes(dim, hidden, dim, layers)?, seed)?)
    }

    /// Affine score `A x̃ + b`.
    pub fn affine(dim: usize, seed: u64) -> Result<Self> {
        Self::new(MlpParams::init(&[dim, dim], seed)?)
    }

    pub fn dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(x)
    }

    /// One input per row.
    pub fn eval_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.net.forward_batch(x)
    }
}

impl SecondOrderModel {
    pub fn new(alpha: MlpParams, beta: Option<MlpParams>, rank: usize) -> Result<Self> {
        let d = alpha.in_dim();
        if alpha.out_dim() != d {
            return Err(shape_err(format!("alpha output {d}"), alpha.out_dim()));
        }
        if let Some(b) = &beta {
            if rank == 0 || rank > d {
                return Err(invalid(format!("rank must be in 1..={d}, got {rank}")));
            }
            if b.in_dim() != d || b.out_dim() != d * rank {
                return Err(shape_err(
                    format!("beta {d} -> {}", d * rank),
                    format!("{} -> {}", b.in_dim(), b.out_dim()),
                ));
            }
        }
        Ok(Self { alpha, beta, rank })
    }

    pub fn init(dim: usize, hidden: usize, layers: usize, rank: usize, mode: SecondOrderMode, seed: u64) -> Result<Self> {
        let alpha = MlpParams::init(&layer_sizes(dim, hidden, dim, layers)?, seed)?;
        let beta = match mode {
            SecondOrderMode::Full => {
                if rank == 0 || rank > dim {
                    return Err(invalid(format!("rank must be in 1..={dim}, got {rank}")));
                }
                Some(MlpParams::init(
                    &layer_sizes(dim, hidden, dim * rank, layers)?,
                    seed.wrapping_add(1),
                )?)
            }
            SecondOrderMode::DiagOnly => None,
        };
        Self::new(alpha, beta, rank)
    }

    pub fn dim(&self) -> usize {
        self.alpha.in_dim()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mode(&self) -> SecondOrderMode {
        if self.beta.is_some() {
            SecondOrderMode::Full
        } else {
            SecondOrderMode::DiagOnly
        }
    }

    pub fn alpha_net(&self) -> &MlpParams {
        &self.alpha
    }

    pub fn beta_net(&self) -> Option<&MlpParams> {
        self.beta.as_ref()
    }

    /// `α + ββᵀ`. Errors in diag-only mode.
    pub fn eval(&self, x: &[f64]) -> Result<Matrix> {
        let flat = self.eval_batch(&Matrix::row_vector(x))?;
        Matrix::from_vec(self.dim(), self.dim(), flat.into_vec())
    }

    /// Row-major `D x D` blocks, one row per input.
    pub fn eval_batch(&self, x: &Matrix) -> Result<Matrix> {
        let beta = self
            .beta
            .as_ref()
            .ok_or_else(|| invalid("full second-order score requested from a diag-only model"))?;
        let d = self.dim();
        let r = self.rank;
        let alpha = self.alpha.forward_batch(x)?;
        let b = beta.forward_batch(x)?;
        let mut out = Matrix::zeros(x.rows(), d * d);
        for n in 0..x.rows() {
            let brow = b.row(n);
            let arow = alpha.row(n);
            let o = out.row_mut(n);
            for i in 0..d {
                let bi = &brow[i * r..(i + 1) * r];
                for j in i..d {
                    let bj = &brow[j * r..(j + 1) * r];
                    let v: f64 = bi.iter().zip(bj).map(|(p, q)| p * q).sum();
                    o[i * d + j] = v;
                    o[j * d + i] = v;
                }
                o[i * d + i] += arow[i];
            }
        }
        Ok(out)
    }

    /// `(α, β)` with one row per input, `β` flattened row-major as `D x rank`.
    /// This is the model's own output; [`Self::eval_batch`] expands it.
    pub fn eval_factors_batch(&self, x: &Matrix) -> Result<(Matrix, Option<Matrix>)> {
        let alpha = self.alpha.forward_batch(x)?;
        let beta = self.beta.as_ref().map(|b| b.forward_batch(x)).transpose()?;
        Ok((alpha, beta))
    }

    /// Diagonal of `s̃₂`; available in both modes.
    pub fn eval_diag(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_diag_batch(&Matrix::row_vector(x))?.into_vec())
    }

    pub fn eval_diag_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut alpha = self.alpha.forward_batch(x)?;
        if let Some(beta) = &self.beta {
            let b = beta.forward_batch(x)?;
            let r = self.rank;
            for n in 0..x.rows() {
                let brow = b.row(n);
                for (i, a) in alpha.row_mut(n).iter_mut().enumerate() {
                    *a += brow[i * r..(i + 1) * r].iter().map(|v| v * v).sum::<f64>();
                }
            }
        }
        Ok(alpha)
    }

    /// `α(x̃)` alone.
    pub fn eval_alpha(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.alpha.forward(x)
    }
}

/// Tape handles for every parameter of a pair.
#[derive(Clone, Debug)]
pub struct PairVars {
    s1: MlpVars,
    alpha: MlpVars,
    beta: Option<MlpVars>,
    rank: usize,
}

impl PairVars {
    pub fn s1_vars(&self) -> &MlpVars {
        &self.s1
    }

    pub fn s1(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.s1.forward(tape, x)
    }

    /// `B x D²`
    pub fn s2_full(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let beta = self
            .beta
            .as_ref()
            .ok_or_else(|| invalid("full second-order loss needs a model with a beta head"))?;
        let a = self.alpha.forward(tape, x)?;
        let a = tape.row_diag(a);
        let b = beta.forward(tape, x)?;
        let bb = tape.row_gram(b, self.rank)?;
        tape.add(a, bb)
    }

    /// `B x D`
    pub fn s2_diag(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = self.alpha.forward(tape, x)?;
        match &self.beta {
            Some(beta) => {
                let b = beta.forward(tape, x)?;
                let bb = tape.row_gram_diag(b, self.rank)?;
                tape.add(a, bb)
            }
            None => Ok(a),
        }
    }

    /// Gradients in the order of [`ScoreModelPair::params_mut`].
    pub fn grads(&self, g: &Gradients) -> Vec<Matrix> {
        let mut out = self.s1.grads(g);
        out.extend(self.alpha.grads(g));
        if let Some(b) = &self.beta {
            out.extend(b.grads(g));
        }
        out
    }

    /// Number of leading entries of [`PairVars::grads`] that belong to the first-order net.
    pub fn s1_param_count(&self, g: &Gradients) -> usize {
        self.s1.grads(g).len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub rank: usize,
    pub mode: SecondOrderMode,
    pub sigma_train: f64,
    /// Sub-network name to file name, relative to the manifest.
    pub networks: std::collections::BTreeMap<String, String>,
}

pub const PAIR_FORMAT: &str = "hosm-score-pair";
pub const MANIFEST_FILE: &str = "manifest.json";

impl ScoreModelPair {
    pub fn new(first: FirstOrderModel, second: SecondOrderModel, sigma_train: f64) -> Result<Self> {
        if first.dim() != second.dim() {
            return Err(shape_err(format!("second-order dim {}", first.dim()), second.dim()));
        }
        Ok(Self {
            first,
            second,
            sigma_train,
        })
    }

    pub fn init(dim: usize, cfg: &ModelConfig, sigma_train: f64, seed: u64) -> Result<Self> {
        let rank = cfg.rank.unwrap_or(dim.min(20));
        // Independent streams so changing one architecture leaves the others' init unchanged.
        let mut seeds = stream(seed, 0xA11CE);
        let first = FirstOrderModel::init(dim, cfg.hidden_s1, cfg.layers, seeds.random())?;
        let second = SecondOrderModel::init(dim, cfg.hidden_s2, cfg.layers, rank, cfg.mode, seeds.random())?;
        Self::new(first, second, sigma_train)
    }

    pub fn dim(&self) -> usize {
        self.first.dim()
    }

    pub fn register(&self, tape: &mut Tape) -> PairVars {
        PairVars {
            s1: self.first.net.register(tape),
            alpha: self.second.alpha.register(tape),
            beta: self.second.beta.as_ref().map(|b| b.register(tape)),
            rank: self.second.rank,
        }
    }

    /// First-order parameters, then α, then β.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.first.net.params_mut();
        out.extend(self.second.alpha.params_mut());
        if let Some(b) = &mut self.second.beta {
            out.extend(b.params_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = self.first.net.params();
        out.extend(self.second.alpha.params());
        if let Some(b) = &self.second.beta {
            out.extend(b.params());
        }
        out
    }

    /// Writes `manifest.json` plus one binary checkpoint per sub-network into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut networks = std::collections::BTreeMap::new();
        let mut write = |name: &str, net: &MlpParams| -> Result<()> {
            let file = format!("{name}.bin");
            fs::write(dir.join(&file), checkpoint::encode(net))?;
            networks.insert(name.to_string(), file);
            Ok(())
        };
        write("s1", &self.first.net)?;
        write("alpha", &self.second.alpha)?;
        if let Some(b) = &self.second.beta {
            write("beta", b)?;
        }
        let manifest = PairManifest {
            format: PAIR_FORMAT.into(),
            version: checkpoint::VERSION,
            dim: self.dim(),
            rank: self.second.rank,
            mode: self.second.mode(),
            sigma_train: self.sigma_train,
            networks,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: PairManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != PAIR_FORMAT || manifest.version != checkpoint::VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let read = |name: &str| -> Result<Option<MlpParams>> {
            match manifest.networks.get(name) {
                Some(f) => Ok(Some(checkpoint::decode(&fs::read(dir.join(f))?)?)),
                None => Ok(None),
            }
        };
        let s1 = read("s1")?.ok_or_else(|| Error::Format("manifest lacks s1".into()))?;
        let alpha = read("alpha")?.ok_or_else(|| Error::Format("manifest lacks alpha".into()))?;
        let beta = read("beta")?;
        if (manifest.mode == SecondOrderMode::Full) != beta.is_some() {
            return Err(Error::Format("mode does not match the stored networks".into()));
        }
        let pair = Self::new(
            FirstOrderModel::new(s1)?,
            SecondOrderModel::new(alpha, beta, manifest.rank)?,
            manifest.sigma_train,
        )?;
        if pair.dim() != manifest.dim {
            return Err(shape_err(format!("manifest dim {}", manifest.dim), pair.dim()));
        }
        Ok(pair)
    }
}
