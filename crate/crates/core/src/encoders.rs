//! Query/key encoder pair: feature extractor, projection head and classifier,
//! trained by momentum SGD on the query side and by exponential averaging on
//! the key side.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::numgrad::{GradError, Gradients, Graph, NodeId, Tensor};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("parameter sets disagree: {0}")]
    ParamMismatch(String),
    #[error("momentum coefficient {0} outside [0, 1)")]
    InvalidAlpha(f64),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0:?}")]
    VersionMismatch(char),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// θ, the feature extractor.
    Extractor,
    /// β, the projection head.
    Projection,
    /// ψ, the classifier.
    Classifier,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next()? {
            "theta" => Some(ParamGroup::Extractor),
            "beta" => Some(ParamGroup::Projection),
            "psi" => Some(ParamGroup::Classifier),
            _ => None,
        }
    }
}

/// Layer widths: `input → hidden[0] → hidden[1]` extractor, then a
/// `hidden[1] → proj_dim` projection and a `hidden[1] → classes` classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub proj_dim: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, proj_dim: usize, classes: usize) -> Self {
        Self { input_dim, hidden: [128, 64], proj_dim, classes }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden[1]
    }

    fn layers(&self) -> [(&'static str, usize, usize); 4] {
        let [h1, h2] = self.hidden;
        [
            ("theta.fc1", self.input_dim, h1),
            ("theta.fc2", h1, h2),
            ("beta.proj", h2, self.proj_dim),
            ("psi.cls", h2, self.classes),
        ]
    }
}

/// Named parameters of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        let mut tensors = BTreeMap::new();
        for (layer, fan_in, fan_out) in arch.layers() {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
            tensors.insert(format!("{layer}.weight"), Tensor::matrix(fan_in, fan_out, w).unwrap());
            tensors.insert(format!("{layer}.bias"), Tensor::zeros(&[fan_out]));
        }
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Result<Self, EncoderError> {
        if let Some(bad) = tensors.keys().find(|k| ParamGroup::of(k).is_none()) {
            return Err(EncoderError::ParamMismatch(format!("{bad} belongs to no parameter group")));
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter().filter(move |(k, _)| ParamGroup::of(k) == Some(group))
    }

    /// Fails unless both sets hold the same names with the same shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<(), EncoderError> {
        if self.tensors.len() != other.tensors.len() {
            return Err(EncoderError::ParamMismatch(format!(
                "{} vs {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(EncoderError::ParamMismatch(format!(
                        "{name}: {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                None => return Err(EncoderError::ParamMismatch(format!("{name} missing"))),
            }
        }
        Ok(())
    }

    /// Registers every tensor as a graph leaf: parameters if `trainable`,
    /// constants otherwise.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Result<BoundParams, GradError> {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.tensors {
            let id = if trainable { graph.param(t.clone())? } else { graph.constant(t.clone())? };
            ids.insert(name.clone(), id);
        }
        Ok(BoundParams { ids })
    }

    /// Copies the gradients of a backward pass into each tensor's grad slot.
    pub fn attach_grads(&mut self, bound: &BoundParams, grads: &Gradients) -> Result<(), EncoderError> {
        for (name, t) in self.tensors.iter_mut() {
            let id = bound.ids[name];
            match grads.get(id) {
                Some(g) => t.set_grad(g.data().to_vec())?,
                None => t.set_grad(vec![0.0; t.len()])?,
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.values_mut().for_each(|t| t.grad = None);
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .all(|(k, t)| other.tensors.get(k).is_some_and(|o| t.bit_eq(o)))
    }
}

/// Graph node for each parameter of a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }
}

/// Graph nodes produced by one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub z: NodeId,
    /// Unit-norm projection (query or key vector).
    pub proj: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// Materialized encoder outputs.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub z: Tensor,
    pub proj: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Records `x → (z, proj, logits, probs)` on `graph`.
pub fn encode(graph: &mut Graph, params: &BoundParams, x: NodeId) -> Result<EncoderNodes, GradError> {
    let h = graph.linear(x, params.id("theta.fc1.weight"), params.id("theta.fc1.bias"))?;
    let h = graph.relu(h)?;
    let z = graph.linear(h, params.id("theta.fc2.weight"), params.id("theta.fc2.bias"))?;
    let z = graph.relu(z)?;
    let p = graph.linear(z, params.id("beta.proj.weight"), params.id("beta.proj.bias"))?;
    let proj = graph.row_l2norm(p)?;
    let logits = graph.linear(z, params.id("psi.cls.weight"), params.id("psi.cls.bias"))?;
    let probs = graph.row_softmax(logits)?;
    Ok(EncoderNodes { z, proj, logits, probs })
}

/// Gradient-free forward pass with the given parameters.
pub fn encode_values(params: &ParamSet, x: &Tensor) -> Result<Encoded, GradError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false)?;
    let xi = g.constant(x.clone())?;
    let n = encode(&mut g, &bound, xi)?;
    Ok(Encoded {
        z: g.value(n.z).clone(),
        proj: g.value(n.proj).clone(),
        logits: g.value(n.logits).clone(),
        probs: g.value(n.probs).clone(),
    })
}

#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub query: ParamSet,
    pub key: ParamSet,
    alpha: f64,
    arch: Architecture,
}

impl EncoderPair {
    /// Fresh query weights; the key encoder starts as an exact copy.
    pub fn new<R: Rng>(arch: Architecture, alpha: f64, rng: &mut R) -> Result<Self, EncoderError> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(EncoderError::InvalidAlpha(alpha));
        }
        let query = ParamSet::init(&arch, rng);
        Ok(Self { key: query.clone(), query, alpha, arch })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    fn check_input(&self, x: &Tensor) -> Result<(), EncoderError> {
        match x.shape() {
            [_, d] if *d == self.arch.input_dim => Ok(()),
            s => Err(GradError::ShapeMismatch {
                op: "encode",
                detail: format!("input {s:?}, expected [batch, {}]", self.arch.input_dim),
            }
            .into()),
        }
    }

    /// Binds the query parameters as trainable leaves and encodes `x`.
    pub fn encode_query(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        x: &Tensor,
    ) -> Result<EncoderNodes, EncoderError> {
        self.check_input(x)?;
        let xi = graph.constant(x.clone())?;
        Ok(encode(graph, bound, xi)?)
    }

    /// Key-side pass; nothing is recorded for backward.
    pub fn encode_key(&self, x: &Tensor) -> Result<Encoded, EncoderError> {
        self.check_input(x)?;
        Ok(encode_values(&self.key, x)?)
    }

    /// Query-side pass without a graph, for evaluation.
    pub fn predict(&self, x: &Tensor) -> Result<Encoded, EncoderError> {
        self.check_input(x)?;
        Ok(encode_values(&self.query, x)?)
    }

    /// `key ← α·key + (1 − α)·previous_query`, where `previous_query` is the
    /// query snapshot taken before this iteration's optimizer step.
    pub fn momentum_update(&mut self, previous_query: &ParamSet) -> Result<(), EncoderError> {
        self.key.check_compatible(previous_query)?;
        let a = self.alpha;
        for (name, k) in self.key.iter_mut() {
            let q = previous_query.get(name).unwrap();
            for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = a * *kv + (1.0 - a) * qv;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), EncoderError> {
        let mut file = io::BufWriter::new(fs::File::create(path)?);
        file.write_all(&encode_checkpoint(&self.query, &self.key))?;
        file.flush()?;
        Ok(())
    }

    /// Replaces both parameter sets from `path`; on any error the pair is untouched.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), EncoderError> {
        let bytes = fs::read(path)?;
        let (query, key) = decode_checkpoint(&bytes)?;
        self.query.check_compatible(&query)?;
        self.key.check_compatible(&key)?;
        self.query = query;
        self.key = key;
        Ok(())
    }
}

/// Classic momentum SGD: `v ← m·v + g; p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: BTreeMap::new() }
    }

    /// Consumes the grad slot of every tensor in `params`.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), EncoderError> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(EncoderError::MissingGrad(name.clone()));
        }
        for (name, t) in params.iter_mut() {
            let grad = t.grad.take().unwrap();
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, vel), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vel = self.momentum * *vel + g;
                *p -= self.lr * *vel;
            }
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 7] = b"TCLCKPT";
const CKPT_VERSION: u8 = b'1';

fn encode_checkpoint(query: &ParamSet, key: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.extend_from_slice(&((query.len() + key.len()) as u32).to_le_bytes());
    for (prefix, set) in [("q.", query), ("k.", key)] {
        for (name, t) in set.iter() {
            let full = format!("{prefix}{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        let end = self.pos.checked_add(n).ok_or(EncoderError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(EncoderError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, EncoderError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into `(query, key)` parameter sets.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamSet, ParamSet), EncoderError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let head = r.take(8).map_err(|_| EncoderError::BadMagic)?;
    if &head[..7] != CKPT_MAGIC {
        return Err(EncoderError::BadMagic);
    }
    if head[7] != CKPT_VERSION {
        return Err(EncoderError::VersionMismatch(head[7] as char));
    }
    let count = r.u32()?;
    let mut query = BTreeMap::new();
    let mut key = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| EncoderError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or(EncoderError::Truncated)?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data)?;
        let slot = if let Some(n) = name.strip_prefix("q.") {
            query.insert(n.to_string(), t)
        } else if let Some(n) = name.strip_prefix("k.") {
            key.insert(n.to_string(), t)
        } else {
            return Err(EncoderError::Malformed(format!("tensor {name} lacks a q./k. prefix")));
        };
        if slot.is_some() {
            return Err(EncoderError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(EncoderError::Malformed("trailing bytes".into()));
    }
    let (query, key) = (ParamSet::from_map(query)?, ParamSet::from_map(key)?);
    query.check_compatible(&key)?;
    Ok((query, key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(input: usize, classes: usize) -> EncoderPair {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        EncoderPair::new(Architecture::new(input, 32, classes), 0.99, &mut rng).unwrap()
    }

    fn batch(rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn set_all(p: &mut ParamSet, v: f64) {
        p.iter_mut().for_each(|(_, t)| t.data_mut().fill(v));
    }

    #[test]
    fn groups_partition_names() {
        let p = pair(8, 4);
        assert_eq!(p.query.len(), 8);
        for name in p.query.names() {
            assert!(ParamGroup::of(name).is_some(), "{name}");
        }
        let total: usize = [ParamGroup::Extractor, ParamGroup::Projection, ParamGroup::Classifier]
            .iter()
            .map(|g| p.query.group(*g).count())
            .sum();
        assert_eq!(total, p.query.len());
    }

    #[test]
    fn identity_extractor_passes_features() {
        let arch = Architecture { input_dim: 2, hidden: [2, 2], proj_dim: 2, classes: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = EncoderPair::new(arch, 0.5, &mut rng).unwrap();
        for name in ["theta.fc1.weight", "theta.fc2.weight"] {
            p.query.get_mut(name).unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let out = p.predict(&Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(out.z.data(), &[1.0, 0.0]);
    }

    #[test]
    fn query_outputs_have_expected_shapes_and_norms() {
        let p = pair(16, 10);
        let mut g = Graph::new();
        let bound = p.query.bind(&mut g, true).unwrap();
        let out = p.encode_query(&mut g, &bound, &batch(7, 16)).unwrap();
        assert_eq!(g.value(out.logits).shape(), &[7, 10]);
        assert_eq!(g.value(out.z).shape(), &[7, 64]);
        let q = g.value(out.proj);
        for i in 0..7 {
            let n: f64 = q.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn key_equals_query_after_init() {
        let p = pair(16, 10);
        let x = batch(5, 16);
        let k = p.encode_key(&x).unwrap();
        let q = p.predict(&x).unwrap();
        assert!(k.proj.bit_eq(&q.proj));
        assert!(k.logits.bit_eq(&q.logits));
        assert!(p.query.bit_eq(&p.key));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let p = pair(16, 10);
        assert!(p.encode_key(&batch(2, 15)).is_err());
    }

    #[test]
    fn momentum_single_step() {
        let mut p = pair(4, 2);
        set_all(&mut p.key, 1.0);
        let mut q = p.query.clone();
        set_all(&mut q, 0.0);
        p.momentum_update(&q).unwrap();
        for (_, t) in p.key.iter() {
            assert!(t.data().iter().all(|&v| v == 0.99));
        }
    }

    #[test]
    fn momentum_zero_alpha_copies_previous_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = EncoderPair::new(Architecture::new(4, 8, 3), 0.0, &mut rng).unwrap();
        let q = ParamSet::init(p.arch(), &mut rng);
        p.momentum_update(&q).unwrap();
        assert!(p.key.bit_eq(&q));
    }

    #[test]
    fn rejects_bad_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(EncoderPair::new(Architecture::new(4, 8, 3), 1.0, &mut rng).is_err());
        assert!(EncoderPair::new(Architecture::new(4, 8, 3), -0.1, &mut rng).is_err());
    }

    fn scalar_set(v: f64) -> ParamSet {
        let mut m = BTreeMap::new();
        m.insert("psi.w".to_string(), Tensor::vector(vec![v]));
        ParamSet::from_map(m).unwrap()
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = scalar_set(1.0);
        p.get_mut("psi.w").unwrap().set_grad(vec![2.0]).unwrap();
        Sgd::new(0.1, 0.0).step(&mut p).unwrap();
        assert!((p.get("psi.w").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut p = scalar_set(0.0);
        let mut opt = Sgd::new(1.0, 0.9);
        p.get_mut("psi.w").unwrap().set_grad(vec![1.0]).unwrap();
        opt.step(&mut p).unwrap();
        assert_eq!(p.get("psi.w").unwrap().item(), -1.0);
        p.get_mut("psi.w").unwrap().set_grad(vec![1.0]).unwrap();
        opt.step(&mut p).unwrap();
        assert!((p.get("psi.w").unwrap().item() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_and_missing_grad() {
        let mut p = scalar_set(0.25);
        p.get_mut("psi.w").unwrap().set_grad(vec![0.0]).unwrap();
        let mut opt = Sgd::new(0.5, 0.9);
        opt.step(&mut p).unwrap();
        assert_eq!(p.get("psi.w").unwrap().item(), 0.25);
        assert!(matches!(opt.step(&mut p), Err(EncoderError::MissingGrad(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut p = pair(8, 4);
        set_all(&mut p.key, 0.125);
        p.save_checkpoint(&path).unwrap();
        let mut fresh = pair(8, 4);
        fresh.load_checkpoint(&path).unwrap();
        assert!(fresh.query.bit_eq(&p.query));
        assert!(fresh.key.bit_eq(&p.key));

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let before = fresh.clone();
        assert!(matches!(fresh.load_checkpoint(&path), Err(EncoderError::BadMagic)));
        assert!(fresh.query.bit_eq(&before.query) && fresh.key.bit_eq(&before.key));

        bytes[0] = b'T';
        bytes[7] = b'2';
        assert!(matches!(decode_checkpoint(&bytes), Err(EncoderError::VersionMismatch('2'))));
        bytes[7] = b'1';
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(EncoderError::Truncated)));
    }

    #[test]
    fn fresh_checkpoint_has_equal_halves() {
        let p = pair(8, 4);
        let bytes = encode_checkpoint(&p.query, &p.key);
        let (q, k) = decode_checkpoint(&bytes).unwrap();
        assert!(q.bit_eq(&k));
        assert_eq!(&bytes[..8], b"TCLCKPT1");
    }
}
