//! Low-rank adapters `Δw = B·A`, their dense fusions, and the `SGAD` file
//! and wire format.
//!
//! Row convention: an attachment point with base weight `W` (`d×k`) maps an
//! input row `x` (length `k`) to `x·Wᵀ`; the adapter adds
//! `scale · (x·Aᵀ)·Bᵀ`, i.e. `scale·B·A·x` in column form.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use crate::tinylm::TinyLM;

pub const DEFAULT_DROPOUT: f64 = 0.1;
/// Standard deviation of the Gaussian `A` initialization.
pub const INIT_STD: f64 = 0.02;

const MAGIC: [u8; 4] = *b"SGAD";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Secure,
    Revealing,
    Global,
    FusedSecure,
    FusedRevealing,
}

impl Role {
    /// Only secure-path units may be serialized into a network message.
    pub fn uploadable(self) -> bool {
        matches!(self, Role::Secure | Role::Global)
    }

    fn byte(self) -> u8 {
        match self {
            Role::Secure => 0,
            Role::Revealing => 1,
            Role::Global => 2,
            Role::FusedSecure => 3,
            Role::FusedRevealing => 4,
        }
    }

    fn from_byte(b: u8) -> Result<Role> {
        Ok(match b {
            0 => Role::Secure,
            1 => Role::Revealing,
            2 => Role::Global,
            3 => Role::FusedSecure,
            4 => Role::FusedRevealing,
            _ => return Err(Error::Format(format!("unknown role byte {b}"))),
        })
    }
}

/// Ranks accepted without `allow_custom_rank`.
pub const STANDARD_RANKS: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// `None` means `4·rank`.
    pub alpha: Option<f64>,
    pub dropout: f64,
    pub allow_custom_rank: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: None,
            dropout: DEFAULT_DROPOUT,
            allow_custom_rank: false,
        }
    }
}

impl LoraConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(4.0 * self.rank as f64)
    }

    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        if self.rank == 0 {
            errors.push(format!("{prefix}.rank must be positive"));
        } else if !self.allow_custom_rank && !STANDARD_RANKS.contains(&self.rank) {
            errors.push(format!(
                "{prefix}.rank {} is not one of {STANDARD_RANKS:?} (set allow_custom_rank to use it)",
                self.rank
            ));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                errors.push(format!("{prefix}.alpha must be positive, got {a}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!(
                "{prefix}.dropout must be in [0,1), got {}",
                self.dropout
            ));
        }
    }

    /// A fresh adapter with this configuration's rank, alpha and dropout.
    pub fn init(&self, model: &TinyLM, role: Role, seed: u64) -> Result<LowRankAdapter> {
        init_adapter(model, self.rank, role, seed)?
            .with_alpha(self.alpha())
            .with_dropout(self.dropout)
    }
}

/// Factors at one attachment point: `A` is `r×k`, `B` is `d×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactors {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    id: String,
    role: Role,
    rank: usize,
    lora_alpha: f64,
    dropout_p: f64,
    points: Vec<(String, LowRankFactors)>,
}

/// One entry of a fused delta's provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub adapter_id: String,
    pub coeff: f64,
}

/// Full `d×k` weight deltas per attachment point.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDelta {
    role: Role,
    points: Vec<(String, Tensor)>,
    provenance: Vec<Provenance>,
}

/// `A ~ N(0, 0.02²)`, `B = 0` at every attachment point of `model`, so the
/// initial delta is exactly zero. `lora_alpha` defaults to `4·r`.
pub fn init_adapter(model: &TinyLM, r: usize, role: Role, seed: u64) -> Result<LowRankAdapter> {
    let mut rng = seed::rng(seed);
    let mut points = Vec::new();
    for p in model.attachment_points() {
        if r == 0 || r > p.d_out.min(p.k_in) {
            return Err(Error::invalid(format!(
                "rank {r} invalid for attachment point {} ({}×{})",
                p.name, p.d_out, p.k_in
            )));
        }
        points.push((
            p.name.clone(),
            LowRankFactors {
                a: Tensor::randn(&[r, p.k_in], INIT_STD, &mut rng),
                b: Tensor::zeros(&[p.d_out, r]),
            },
        ));
    }
    Ok(LowRankAdapter {
        id: format!("{role:?}-{seed:016x}").to_lowercase(),
        role,
        rank: r,
        lora_alpha: 4.0 * r as f64,
        dropout_p: DEFAULT_DROPOUT,
        points,
    })
}

impl LowRankAdapter {
    /// Builds an adapter from explicit factors, validating shapes.
    pub fn from_factors(
        id: impl Into<String>,
        role: Role,
        lora_alpha: f64,
        dropout_p: f64,
        points: Vec<(String, LowRankFactors)>,
    ) -> Result<Self> {
        let rank = points
            .first()
            .map(|(_, f)| f.a.shape()[0])
            .ok_or_else(|| Error::invalid("adapter without points"))?;
        for (name, f) in &points {
            let (r, _) = f.a.matrix_dims("adapter")?;
            let (_, r2) = f.b.matrix_dims("adapter")?;
            if r != rank || r2 != rank {
                return Err(Error::shape(
                    "adapter",
                    format!(
                        "{name}: A {:?}, B {:?}, rank {rank}",
                        f.a.shape(),
                        f.b.shape()
                    ),
                ));
            }
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::invalid(format!(
                "dropout {dropout_p} outside [0, 1)"
            )));
        }
        if !lora_alpha.is_finite() {
            return Err(Error::invalid("lora_alpha must be finite"));
        }
        Ok(LowRankAdapter {
            id: id.into(),
            role,
            rank,
            lora_alpha,
            dropout_p,
            points,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lora_alpha(&self) -> f64 {
        self.lora_alpha
    }

    pub fn with_alpha(mut self, lora_alpha: f64) -> Self {
        self.lora_alpha = lora_alpha;
        self
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn with_dropout(mut self, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout {p} outside [0, 1)")));
        }
        self.dropout_p = p;
        Ok(self)
    }

    /// `lora_alpha / r`.
    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    pub fn points(&self) -> &[(String, LowRankFactors)] {
        &self.points
    }

    pub fn factors(&self, point: &str) -> Result<&LowRankFactors> {
        self.points
            .iter()
            .find(|(n, _)| n == point)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::invalid(format!("adapter has no attachment point `{point}`")))
    }

    /// Every factor in point order: `A₀, B₀, A₁, B₁, …`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.points.iter().flat_map(|(_, f)| [&f.a, &f.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.points
            .iter_mut()
            .flat_map(|(_, f)| [&mut f.a, &mut f.b])
            .collect()
    }

    /// A copy with factors replaced, in the order of [`LowRankAdapter::tensors`].
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 2 * self.points.len() {
            return Err(Error::shape(
                "with_tensors",
                format!("{} tensors for {} points", tensors.len(), self.points.len()),
            ));
        }
        let mut out = self.clone();
        for (slot, t) in out.tensors_mut().into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "with_tensors",
                    format!("{:?} vs {:?}", slot.shape(), t.shape()),
                ));
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// FLOPs of forming every `B·A` product: `2·d_out·r·k_in` per point.
    pub fn merge_flops(&self) -> u64 {
        self.points
            .iter()
            .map(|(_, f)| 2 * (f.b.shape()[0] * f.a.shape()[0] * f.a.shape()[1]) as u64)
            .sum()
    }

    /// `scale · (dropout(x·Aᵀ))·Bᵀ` for input rows `x` (`n×k`). Dropout is
    /// active only when `training`, with its mask drawn from `seed`.
    pub fn apply(&self, point: &str, x: &Tensor, training: bool, seed: u64) -> Result<Tensor> {
        let f = self.factors(point)?;
        let (_, k) = x.matrix_dims("lora.apply")?;
        if k != f.a.cols() {
            return Err(Error::shape(
                "lora.apply",
                format!("input width {k}, adapter expects {}", f.a.cols()),
            ));
        }
        let mut ax = x.matmul(&transpose(&f.a))?;
        if training && self.dropout_p > 0.0 {
            let mut rng = seed::rng(seed);
            let keep = 1.0 / (1.0 - self.dropout_p);
            for v in ax.data_mut() {
                *v *= if rng.gen::<f64>() < self.dropout_p {
                    0.0
                } else {
                    keep
                };
            }
        }
        Ok(ax.matmul(&transpose(&f.b))?.scaled(self.scale()))
    }

    /// `scale · B·A` at one point (`d×k`).
    pub fn effective_delta(&self, point: &str) -> Result<Tensor> {
        let f = self.factors(point)?;
        Ok(f.b.matmul(&f.a)?.scaled(self.scale()))
    }

    pub fn to_dense(&self) -> Result<DenseDelta> {
        let points = self
            .points
            .iter()
            .map(|(n, _)| Ok((n.clone(), self.effective_delta(n)?)))
            .collect::<Result<_>>()?;
        let role = match self.role {
            Role::Revealing | Role::FusedRevealing => Role::FusedRevealing,
            _ => Role::FusedSecure,
        };
        Ok(DenseDelta {
            role,
            points,
            provenance: vec![Provenance {
                adapter_id: self.id.clone(),
                coeff: 1.0,
            }],
        })
    }
}

impl DenseDelta {
    pub fn new(
        role: Role,
        points: Vec<(String, Tensor)>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("dense delta without points"));
        }
        for (n, t) in &points {
            t.matrix_dims("dense_delta")
                .map_err(|_| Error::shape("dense_delta", format!("{n}: {:?}", t.shape())))?;
        }
        Ok(DenseDelta {
            role,
            points,
            provenance,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn points(&self) -> &[(String, Tensor)] {
        &self.points
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn delta(&self, point: &str) -> Result<&Tensor> {
        self.points
            .iter()
            .find(|(n, _)| n == point)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid(format!("delta has no attachment point `{point}`")))
    }

    pub fn param_count(&self) -> usize {
        self.points.iter().map(|(_, t)| t.numel()).sum()
    }

    /// `x·Δᵀ` for input rows `x`.
    pub fn apply(&self, point: &str, x: &Tensor) -> Result<Tensor> {
        x.matmul(&transpose(self.delta(point)?))
    }

    /// `Σ coeffs[i]·deltas[i]`, point by point. Provenance concatenates the
    /// inputs' provenance with coefficients multiplied through.
    pub fn combine(deltas: &[&DenseDelta], coeffs: &[f64], role: Role) -> Result<DenseDelta> {
        check_lists(deltas.len(), coeffs.len())?;
        let first = deltas[0];
        let mut points: Vec<(String, Tensor)> = first
            .points
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        let mut provenance = Vec::new();
        for (d, &c) in deltas.iter().zip(coeffs) {
            if d.points.len() != points.len() {
                return Err(Error::shape(
                    "fuse",
                    "adapters cover different attachment points",
                ));
            }
            for ((name, acc), (n2, t)) in points.iter_mut().zip(&d.points) {
                if name != n2 || acc.shape() != t.shape() {
                    return Err(Error::shape(
                        "fuse",
                        format!("{name} {:?} vs {n2} {:?}", acc.shape(), t.shape()),
                    ));
                }
                acc.axpy(c, t)?;
            }
            provenance.extend(d.provenance.iter().map(|p| Provenance {
                adapter_id: p.adapter_id.clone(),
                coeff: p.coeff * c,
            }));
        }
        Ok(DenseDelta {
            role,
            points,
            provenance,
        })
    }
}

/// `Σ coeffs[i] · scale_i·B_i·A_i` per point, as a dense delta.
pub fn fuse(adapters: &[&LowRankAdapter], coeffs: &[f64], role: Role) -> Result<DenseDelta> {
    check_lists(adapters.len(), coeffs.len())?;
    let dense = adapters
        .iter()
        .map(|a| a.to_dense())
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DenseDelta> = dense.iter().collect();
    DenseDelta::combine(&refs, coeffs, role)
}

fn check_lists(n: usize, m: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("fuse needs at least one adapter"));
    }
    if n != m {
        return Err(Error::invalid(format!("{n} adapters but {m} coefficients")));
    }
    Ok(())
}

pub(crate) fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = t.matrix_dims("transpose").expect("matrix");
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

/// Either kind of adapter file.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterFile {
    LowRank(LowRankAdapter),
    Dense(DenseDelta),
}

/// Layout (little-endian): magic `SGAD`, version u16, role u8, rank u16
/// (0 marks a dense delta), id string, point count u32, then per point its
/// name and tensors. Low-rank files carry `lora_alpha` and dropout as f64
/// before the points and `A`, `B` per point; dense files carry one delta per
/// point followed by the provenance list. Tensors are stored as f32.
pub fn encode(file: &AdapterFile) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u16(VERSION);
    match file {
        AdapterFile::LowRank(a) => {
            w.u8(a.role.byte());
            w.u16(a.rank as u16);
            w.str(&a.id);
            w.f64(a.lora_alpha);
            w.f64(a.dropout_p);
            w.u32(a.points.len() as u32);
            for (name, f) in &a.points {
                w.str(name);
                w.tensor(&f.a);
                w.tensor(&f.b);
            }
        }
        AdapterFile::Dense(d) => {
            w.u8(d.role.byte());
            w.u16(0);
            w.str("");
            w.u32(d.points.len() as u32);
            for (name, t) in &d.points {
                w.str(name);
                w.tensor(t);
            }
            w.u32(d.provenance.len() as u32);
            for p in &d.provenance {
                w.str(&p.adapter_id);
                w.f64(p.coeff);
            }
        }
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<AdapterFile> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let role = Role::from_byte(r.u8()?)?;
    let rank = r.u16()? as usize;
    let id = r.str()?;
    let file = if rank == 0 {
        let n = r.u32()? as usize;
        let mut points = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            points.push((r.str()?, r.tensor()?));
        }
        let np = r.u32()? as usize;
        let mut provenance = Vec::with_capacity(np.min(1024));
        for _ in 0..np {
            provenance.push(Provenance {
                adapter_id: r.str()?,
                coeff: r.f64()?,
            });
        }
        AdapterFile::Dense(DenseDelta::new(role, points, provenance)?)
    } else {
        let alpha = r.f64()?;
        let dropout = r.f64()?;
        let n = r.u32()? as usize;
        let mut points = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.str()?;
            let a = r.tensor()?;
            let b = r.tensor()?;
            points.push((name, LowRankFactors { a, b }));
        }
        let adapter = LowRankAdapter::from_factors(id, role, alpha, dropout, points)?;
        if adapter.rank != rank {
            return Err(Error::Format(format!(
                "header rank {rank}, factors rank {}",
                adapter.rank
            )));
        }
        AdapterFile::LowRank(adapter)
    };
    r.finish()?;
    Ok(file)
}

/// Serializes an adapter for the simulated network. Anything off the secure
/// path is refused.
pub fn encode_message(adapter: &LowRankAdapter) -> Result<Vec<u8>> {
    if !adapter.role.uploadable() {
        return Err(Error::Refused(format!(
            "{:?} adapter `{}` cannot leave the client",
            adapter.role, adapter.id
        )));
    }
    Ok(encode(&AdapterFile::LowRank(adapter.clone())))
}

/// Dense deltas are local artifacts and are never network messages.
pub fn encode_dense_message(delta: &DenseDelta) -> Result<Vec<u8>> {
    Err(Error::Refused(format!(
        "{:?} dense delta cannot be sent over the network",
        delta.role
    )))
}

/// Decodes a network message, which must be an uploadable low-rank adapter.
pub fn decode_message(bytes: &[u8]) -> Result<LowRankAdapter> {
    match decode(bytes)? {
        AdapterFile::LowRank(a) if a.role.uploadable() => Ok(a),
        AdapterFile::LowRank(a) => Err(Error::Refused(format!(
            "message carries a {:?} adapter",
            a.role
        ))),
        AdapterFile::Dense(_) => Err(Error::Refused("message carries a dense delta".into())),
    }
}

pub fn save(file: &AdapterFile, path: &Path) -> Result<()> {
    std::fs::write(path, encode(file))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<AdapterFile> {
    decode(&std::fs::read(path)?)
}

impl LowRankAdapter {
    /// Entries rounded to f32, matching what a save/load round trip yields.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.round_to_f32();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adapter(id: &str, a: f64, b: f64) -> LowRankAdapter {
        let f = LowRankFactors {
            a: Tensor::new(vec![1, 1], vec![a]).unwrap(),
            b: Tensor::new(vec![1, 1], vec![b]).unwrap(),
        };
        LowRankAdapter::from_factors(id, Role::Secure, 1.0, 0.0, vec![("p".into(), f)]).unwrap()
    }

    fn random_adapter(seed: u64, role: Role) -> LowRankAdapter {
        let mut rng = seed::rng(seed);
        let points = (0..2)
            .map(|i| {
                (
                    format!("layer{i}.q"),
                    LowRankFactors {
                        a: Tensor::randn(&[2, 5], 1.0, &mut rng),
                        b: Tensor::randn(&[4, 2], 1.0, &mut rng),
                    },
                )
            })
            .collect();
        LowRankAdapter::from_factors(format!("a{seed}"), role, 8.0, 0.1, points).unwrap()
    }

    #[test]
    fn scale_four_means_apply_is_four_b_a_x() {
        let a = random_adapter(1, Role::Secure);
        assert_eq!(a.scale(), 4.0);
        let x = Tensor::randn(&[3, 5], 1.0, &mut seed::rng(2));
        let got = a.apply("layer0.q", &x, false, 0).unwrap();
        let f = a.factors("layer0.q").unwrap();
        let want = x
            .matmul(&transpose(&f.b.matmul(&f.a).unwrap()))
            .unwrap()
            .scaled(4.0);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        let zero = a
            .apply("layer0.q", &Tensor::zeros(&[2, 5]), false, 0)
            .unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn fuse_scalar_examples() {
        let x = scalar_adapter("x", 2.0, 3.0); // delta 6
        let y = scalar_adapter("y", 1.0, 4.0); // delta 4
        let mean = fuse(&[&x, &y], &[0.5, 0.5], Role::FusedSecure).unwrap();
        assert_eq!(mean.delta("p").unwrap().data(), &[5.0]);
        let first = fuse(&[&x, &y], &[1.0, 0.0], Role::FusedSecure).unwrap();
        assert_eq!(first.delta("p").unwrap(), &x.effective_delta("p").unwrap());
        let none = fuse(&[&x, &y], &[0.0, 0.0], Role::FusedSecure).unwrap();
        assert_eq!(none.delta("p").unwrap().max_abs(), 0.0);
        assert_eq!(mean.provenance().len(), 2);
        assert!(fuse(&[], &[], Role::FusedSecure).is_err());
        assert!(fuse(&[&x], &[1.0, 2.0], Role::FusedSecure).is_err());
    }

    #[test]
    fn round_trip_both_kinds() {
        let a = random_adapter(3, Role::Revealing);
        let back = decode(&encode(&AdapterFile::LowRank(a.clone()))).unwrap();
        assert_eq!(back, AdapterFile::LowRank(a.rounded_to_f32()));

        let d = fuse(
            &[&a, &random_adapter(4, Role::Global)],
            &[0.3, -1.2],
            Role::FusedRevealing,
        )
        .unwrap();
        let AdapterFile::Dense(back) = decode(&encode(&AdapterFile::Dense(d.clone()))).unwrap()
        else {
            panic!()
        };
        assert_eq!(back.provenance(), d.provenance());
        assert_eq!(back.role(), Role::FusedRevealing);
        for ((_, x), (_, y)) in back.points().iter().zip(d.points()) {
            assert!(x
                .data()
                .iter()
                .zip(y.data())
                .all(|(p, q)| *p == *q as f32 as f64));
        }
    }

    #[test]
    fn corrupt_and_truncated_files_are_rejected() {
        let bytes = encode(&AdapterFile::LowRank(random_adapter(5, Role::Secure)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("bad magic"));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode(&ver), Err(Error::Version { .. })));
        for cut in [5, 12, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn revealing_roles_never_become_messages() {
        assert!(matches!(
            encode_message(&random_adapter(6, Role::Revealing)),
            Err(Error::Refused(_))
        ));
        let d = random_adapter(6, Role::Secure).to_dense().unwrap();
        assert!(encode_dense_message(&d).is_err());
        let ok = encode_message(&random_adapter(6, Role::Secure)).unwrap();
        assert!(decode_message(&ok).is_ok());
        let smuggled = encode(&AdapterFile::LowRank(random_adapter(7, Role::Revealing)));
        assert!(decode_message(&smuggled).is_err());
    }
}
