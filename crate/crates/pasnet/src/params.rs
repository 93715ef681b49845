//! Named parameter storage shared by the model, optimizer and checkpoints.
//!
//! Parameters live outside any tape; each training step binds them onto a
//! fresh [`Tape`] as differentiable leaves, runs forward/backward, then reads
//! the gradients back out by index.  Entries keep their creation order, which
//! is what makes initialisation, optimizer sweeps and checkpoint layout
//! deterministic for a fixed seed.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::scalar::Scalar;
use crate::tensor::{Result as TensorResult, Tape, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<E> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    /// False for running statistics and other state that is checkpointed but
    /// never touched by the optimizer.
    pub trainable: bool,
}

/// Ordered, name-addressable collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E> {
    entries: Vec<Param<E>>,
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `(-sqrt(6/fan_in), sqrt(6/fan_in))`, the usual choice in
    /// front of ReLUs.
    KaimingUniform { fan_in: usize },
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all trainable parameters.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<E> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<E>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<E>)> {
        self.entries.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<E>, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Param { name, shape, data, trainable });
        ParamId(self.entries.len() - 1)
    }

    /// Copy every entry onto `tape`: trainable parameters become
    /// differentiable leaves, buffers become constants.  The returned
    /// binding maps [`ParamId`]s to tape handles for this pass.
    pub fn bind(&self, tape: &mut Tape<E>) -> TensorResult<Binding> {
        let mut ids = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            let t = if p.trainable {
                tape.var(&p.shape, p.data.clone())?
            } else {
                tape.leaf(&p.shape, p.data.clone())?
            };
            ids.push(t);
        }
        Ok(Binding { ids })
    }

    /// Freeze every parameter under a dotted name prefix. One-way on
    /// purpose: `trainable` is also what separates weights from running-stat
    /// buffers, so a blanket unfreeze could turn buffers into weights.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut changed = 0;
        for p in &mut self.entries {
            if p.name.starts_with(prefix) && p.trainable {
                p.trainable = false;
                changed += 1;
            }
        }
        changed
    }

    /// Overwrite every trainable parameter with a constant (test hook for
    /// "zero parameters" behaviour contracts).
    pub fn fill_trainable(&mut self, value: f64) {
        let v = E::from_f64(value);
        for p in &mut self.entries {
            if p.trainable {
                p.data.iter_mut().for_each(|x| *x = v);
            }
        }
    }
}

/// Tape handles for one forward pass, indexed by [`ParamId`].
pub struct Binding {
    ids: Vec<Tensor>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> Tensor {
        self.ids[id.0]
    }
}

/// FNV-1a over the parameter path; keys an RNG stream per name. Hand-rolled
/// because the std hasher makes no cross-version stability promise.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Name-scoped constructor handed to blocks while the model is assembled.
///
/// Random draws come from a stream keyed by the parameter's full path, so a
/// parameter's initial values depend only on the seed and its own name —
/// never on which sibling modules exist or in what order blocks were built.
/// Model variants that share a sub-block therefore share that block's
/// initialisation exactly, which keeps architecture comparisons free of
/// initialisation luck.
pub struct Scope<'a, E: Scalar> {
    store: &'a mut ParamStore<E>,
    rng: &'a mut ChaCha20Rng,
    prefix: String,
}

impl<'a, E: Scalar> Scope<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, rng: &'a mut ChaCha20Rng) -> Self {
        Scope { store, rng, prefix: String::new() }
    }

    /// Nested scope whose parameters are prefixed `"{prefix}{name}."`.
    pub fn child(&mut self, name: &str) -> Scope<'_, E> {
        Scope {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}{}.", self.prefix, name),
        }
    }

    /// Draw source for one named parameter: the seed material of the shared
    /// generator on the stream `fnv1a(path)`, rewound to position zero.
    fn name_rng(&self, full_name: &str) -> ChaCha20Rng {
        let mut r = self.rng.clone();
        r.set_stream(fnv1a(full_name.as_bytes()));
        r.set_word_pos(0);
        r
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = format!("{}{}", self.prefix, name);
        let n: usize = shape.iter().product();
        let data: Vec<E> = match init {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::Const(c) => vec![E::from_f64(c); n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut draw = self.name_rng(&full);
                (0..n).map(|_| E::from_f64(draw.gen_range(-bound..bound))).collect()
            }
        };
        self.store.push(full, shape.to_vec(), data, true)
    }

    /// Non-trainable state (running statistics).
    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.store.push(
            format!("{}{}", self.prefix, name),
            shape.to_vec(),
            vec![E::from_f64(value); n],
            false,
        )
    }

    /// Overwrite an already-created parameter with a constant; lets a block
    /// adjust one tensor of a sub-block (e.g. a head bias prior) without a
    /// constructor variant for every combination.
    pub fn set_const(&mut self, id: ParamId, value: f64) {
        let v = E::from_f64(value);
        self.store.get_mut(id).data.iter_mut().for_each(|x| *x = v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn scoped_names_and_order_are_deterministic() {
        let build = |seed: u64| {
            let mut store: ParamStore<f64> = ParamStore::new();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut root = Scope::new(&mut store, &mut rng);
            let mut block = root.child("stem");
            block.param("w", &[2, 3], Init::KaimingUniform { fan_in: 3 });
            block.buffer("running_mean", &[2], 0.0);
            drop(block);
            root.param("head", &[4], Init::Zeros);
            store
        };
        let a = build(9);
        let b = build(9);
        let names: Vec<&str> = a.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names, ["stem.w", "stem.running_mean", "head"]);
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.data, pb.data, "same seed must give identical values");
        }
        let c = build(10);
        let ca = c.find("stem.w").unwrap();
        assert_ne!(a.get(a.find("stem.w").unwrap()).data, c.get(ca).data);
    }

    #[test]
    fn init_depends_only_on_seed_and_name() {
        // Build the same block alone and next to an unrelated sibling; its
        // values must not move, and distinct names must not share a stream.
        let alone = {
            let mut store: ParamStore<f64> = ParamStore::new();
            let mut rng = ChaCha20Rng::seed_from_u64(3);
            let mut root = Scope::new(&mut store, &mut rng);
            root.child("core").param("w", &[4, 4], Init::KaimingUniform { fan_in: 4 });
            store
        };
        let crowded = {
            let mut store: ParamStore<f64> = ParamStore::new();
            let mut rng = ChaCha20Rng::seed_from_u64(3);
            let mut root = Scope::new(&mut store, &mut rng);
            root.child("extra").param("w", &[9], Init::KaimingUniform { fan_in: 9 });
            root.child("core").param("w", &[4, 4], Init::KaimingUniform { fan_in: 4 });
            root.child("more").param("w", &[7], Init::KaimingUniform { fan_in: 7 });
            store
        };
        let a = alone.get(alone.find("core.w").unwrap());
        let b = crowded.get(crowded.find("core.w").unwrap());
        assert_eq!(a.data, b.data, "siblings must not perturb an existing parameter's init");
        let extra = crowded.get(crowded.find("extra.w").unwrap());
        assert_ne!(&b.data[..9], &extra.data[..], "distinct names must draw distinct values");
    }

    #[test]
    fn init_streams_still_react_to_the_seed() {
        let build = |seed: u64| {
            let mut store: ParamStore<f64> = ParamStore::new();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut root = Scope::new(&mut store, &mut rng);
            root.param("w", &[8], Init::KaimingUniform { fan_in: 8 });
            store
        };
        let a = build(5);
        let b = build(6);
        assert_ne!(a.get(a.find("w").unwrap()).data, b.get(b.find("w").unwrap()).data);
    }

    #[test]
    fn binding_distinguishes_trainable_from_buffers() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut scope = Scope::new(&mut store, &mut rng);
        let w = scope.param("w", &[2], Init::Ones);
        let rm = scope.buffer("rm", &[2], 0.5);
        let mut tape: Tape<f64> = Tape::new();
        let binding = store.bind(&mut tape).unwrap();
        assert!(tape.requires_grad(binding.get(w)));
        assert!(!tape.requires_grad(binding.get(rm)));
        assert_eq!(tape.data(binding.get(rm)), &[0.5, 0.5]);
    }

    #[test]
    fn trainable_scalar_count_excludes_buffers() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut scope = Scope::new(&mut store, &mut rng);
        scope.param("a", &[3, 2], Init::Zeros);
        scope.buffer("b", &[10], 0.0);
        assert_eq!(store.num_trainable_scalars(), 6);
    }
}
