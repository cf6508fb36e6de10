//! Small classifier architectures: registry, deterministic init, forward
//! evaluation, and checkpoint serialization.
//!
//! Four architectures share a (1, 16, 16) input and 10 classes. Two MLPs and
//! two CNNs give the cross-architecture structure needed for transfer
//! evaluation.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::tensor::Tensor;

pub const INPUT_H: usize = 16;
pub const INPUT_W: usize = 16;
pub const INPUT_DIM: usize = INPUT_H * INPUT_W;
pub const NUM_CLASSES: usize = 10;

const MAGIC: &[u8; 4] = b"TLAB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    MlpS,
    MlpL,
    CnnS,
    CnnL,
}

impl ArchId {
    pub const ALL: [ArchId; 4] = [ArchId::MlpS, ArchId::MlpL, ArchId::CnnS, ArchId::CnnL];

    pub fn name(&self) -> &'static str {
        match self {
            ArchId::MlpS => "mlp_s",
            ArchId::MlpL => "mlp_l",
            ArchId::CnnS => "cnn_s",
            ArchId::CnnL => "cnn_l",
        }
    }

    pub fn from_name(s: &str) -> Option<ArchId> {
        ArchId::ALL.iter().copied().find(|a| a.name() == s)
    }

    fn code(&self) -> u8 {
        match self {
            ArchId::MlpS => 0,
            ArchId::MlpL => 1,
            ArchId::CnnS => 2,
            ArchId::CnnL => 3,
        }
    }

    fn from_code(c: u8) -> Result<ArchId, ModelError> {
        match c {
            0 => Ok(ArchId::MlpS),
            1 => Ok(ArchId::MlpL),
            2 => Ok(ArchId::CnnS),
            3 => Ok(ArchId::CnnL),
            other => Err(ModelError::UnknownArch(other)),
        }
    }
}

struct ParamSpec {
    name: &'static str,
    shape: &'static [usize],
    /// fan-in for Kaiming-uniform weights; 0 marks a zero-initialized bias
    fan_in: usize,
}

fn param_specs(arch: ArchId) -> &'static [ParamSpec] {
    macro_rules! p {
        ($name:literal, $shape:expr, $fan:expr) => {
            ParamSpec {
                name: $name,
                shape: &$shape,
                fan_in: $fan,
            }
        };
    }
    match arch {
        ArchId::MlpS => &[
            p!("fc1.w", [256, 64], 256),
            p!("fc1.b", [64], 0),
            p!("fc2.w", [64, 10], 64),
            p!("fc2.b", [10], 0),
        ],
        ArchId::MlpL => &[
            p!("fc1.w", [256, 128], 256),
            p!("fc1.b", [128], 0),
            p!("fc2.w", [128, 64], 128),
            p!("fc2.b", [64], 0),
            p!("fc3.w", [64, 10], 64),
            p!("fc3.b", [10], 0),
        ],
        ArchId::CnnS => &[
            p!("conv1.w", [8, 1, 3, 3], 9),
            p!("conv1.b", [8], 0),
            p!("conv2.w", [8, 8, 3, 3], 72),
            p!("conv2.b", [8], 0),
            p!("fc1.w", [2048, 16], 2048),
            p!("fc1.b", [16], 0),
            p!("fc2.w", [16, 10], 16),
            p!("fc2.b", [10], 0),
        ],
        ArchId::CnnL => &[
            p!("conv1.w", [16, 1, 3, 3], 9),
            p!("conv1.b", [16], 0),
            p!("conv2.w", [16, 16, 3, 3], 144),
            p!("conv2.b", [16], 0),
            p!("fc1.w", [4096, 64], 4096),
            p!("fc1.b", [64], 0),
            p!("fc2.w", [64, 10], 64),
            p!("fc2.b", [10], 0),
        ],
    }
}

/// Frozen golden parameter counts; a registry edit that changes any of these
/// is a format break.
pub fn golden_param_count(arch: ArchId) -> usize {
    match arch {
        ArchId::MlpS => 17_098,
        ArchId::MlpL => 41_802,
        ArchId::CnnS => 33_618,
        ArchId::CnnL => 265_338,
    }
}

/// Named, ordered parameter collection for one architecture.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub arch: ArchId,
    params: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every parameter on a tape in declaration order.
    pub fn leaf_vars(&self, tape: &Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    pub fn replace_tensors(&mut self, tensors: Vec<Tensor>) {
        debug_assert_eq!(tensors.len(), self.params.len());
        for ((_, dst), src) in self.params.iter_mut().zip(tensors) {
            *dst = src;
        }
    }

    /// SHA-256 of the checkpoint encoding; used for determinism checks.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.encode());
        hex_string(&hasher.finalize())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.arch.code());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Kaiming-uniform weights, zero biases; bit-identical for equal (arch, seed).
pub fn init(arch: ArchId, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (arch.code() as u64) << 56);
    let mut params = Vec::new();
    for spec in param_specs(arch) {
        let n: usize = spec.shape.iter().product();
        let data = if spec.fan_in == 0 {
            vec![0.0; n]
        } else {
            let bound = (6.0 / spec.fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        params.push((
            spec.name.to_string(),
            Tensor::from_parts(spec.shape.to_vec(), data),
        ));
    }
    let set = ParamSet { arch, params };
    debug_assert_eq!(set.total_len(), golden_param_count(arch));
    set
}

fn batch_size(shape: &[usize], arch: ArchId) -> Result<usize, ModelError> {
    match shape {
        [n, c, h, w] if *c == 1 && *h == INPUT_H && *w == INPUT_W => Ok(*n),
        [n, d] if *d == INPUT_DIM => Ok(*n),
        s => Err(ModelError::InputShape {
            arch: arch.name(),
            got: s.to_vec(),
            want: format!("(N,1,{INPUT_H},{INPUT_W}) or (N,{INPUT_DIM})"),
        }),
    }
}

/// Builds the logits graph on `tape`; `param_vars` must follow declaration
/// order (as produced by [`ParamSet::leaf_vars`]).
pub fn forward_graph(
    arch: ArchId,
    param_vars: &[Var],
    x: &Var,
) -> Result<Var, ModelError> {
    let n = batch_size(&x.shape(), arch)?;
    let logits = match arch {
        ArchId::MlpS => {
            let x2 = x.reshape(vec![n, INPUT_DIM])?;
            let h = x2.matmul(&param_vars[0])?.add_rowvec(&param_vars[1])?.relu()?;
            h.matmul(&param_vars[2])?.add_rowvec(&param_vars[3])?
        }
        ArchId::MlpL => {
            let x2 = x.reshape(vec![n, INPUT_DIM])?;
            let h1 = x2.matmul(&param_vars[0])?.add_rowvec(&param_vars[1])?.relu()?;
            let h2 = h1.matmul(&param_vars[2])?.add_rowvec(&param_vars[3])?.relu()?;
            h2.matmul(&param_vars[4])?.add_rowvec(&param_vars[5])?
        }
        ArchId::CnnS | ArchId::CnnL => {
            let x4 = x.reshape(vec![n, 1, INPUT_H, INPUT_W])?;
            let a = x4
                .conv2d(&param_vars[0])?
                .add_chan_bias(&param_vars[1])?
                .relu()?;
            let b = a
                .conv2d(&param_vars[2])?
                .add_chan_bias(&param_vars[3])?
                .relu()?;
            let chans = if arch == ArchId::CnnS { 8 } else { 16 };
            let flat = b.reshape(vec![n, chans * INPUT_DIM])?;
            let h = flat
                .matmul(&param_vars[4])?
                .add_rowvec(&param_vars[5])?
                .relu()?;
            h.matmul(&param_vars[6])?.add_rowvec(&param_vars[7])?
        }
    };
    Ok(logits)
}

/// Untracked forward pass: logits tensor of shape (N, 10).
pub fn forward(params: &ParamSet, x: &Tensor) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let pv = params.leaf_vars(&tape, false);
    let xv = tape.constant(x.clone());
    Ok(forward_graph(params.arch, &pv, &xv)?.tensor())
}

/// Argmax per row; ties broken by the lowest class index.
pub fn predict(params: &ParamSet, x: &Tensor) -> Result<Vec<usize>, ModelError> {
    let logits = forward(params, x)?;
    Ok(argmax_rows(&logits))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let [n, c] = logits.shape() else {
        panic!("argmax expects 2-D logits, got {:?}", logits.shape());
    };
    let (n, c) = (*n, *c);
    let d = logits.data();
    (0..n)
        .map(|i| {
            let row = &d[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), ModelError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&params.encode())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Load, additionally requiring the checkpoint to hold `arch`.
pub fn load_expect(path: &Path, arch: ArchId) -> Result<ParamSet, ModelError> {
    let p = load(path)?;
    if p.arch != arch {
        return Err(ModelError::ArchMismatch {
            arch: arch.name(),
            detail: format!("checkpoint holds {}", p.arch.name()),
        });
    }
    Ok(p)
}

fn decode(bytes: &[u8]) -> Result<ParamSet, ModelError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *pos + n > bytes.len() {
            return Err(ModelError::Truncated);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::BadVersion(version));
    }
    let arch = ArchId::from_code(take(&mut pos, 1)?[0])?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let specs = param_specs(arch);
    if count != specs.len() {
        return Err(ModelError::ArchMismatch {
            arch: arch.name(),
            detail: format!("expected {} parameters, file has {count}", specs.len()),
        });
    }
    let mut params = Vec::with_capacity(count);
    for spec in specs {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| ModelError::ArchMismatch {
                arch: arch.name(),
                detail: "non-UTF-8 parameter name".into(),
            })?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        if name != spec.name || shape != spec.shape {
            return Err(ModelError::ArchMismatch {
                arch: arch.name(),
                detail: format!(
                    "parameter {name} {shape:?} does not match registry {} {:?}",
                    spec.name, spec.shape
                ),
            });
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(ParamSet { arch, params })
}
