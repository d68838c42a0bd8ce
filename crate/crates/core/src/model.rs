//! Full parameter set and the per-frame template pipeline shared by online
//! tracking and training: attend, control, read, combine, correlate, write.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionParams};
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::config::{Config, Variant};
use crate::controller::{self, ControlSignals, ControllerParams, ControllerState};
use crate::error::Result;
use crate::featnet::{self, FeatNetParams};
use crate::memory::{self, MemoryState};

const RESPONSE_GAIN_INIT: f32 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub featnet: FeatNetParams<P>,
    pub attention: AttentionParams<P>,
    pub controller: ControllerParams<P>,
    /// Scalar gain and bias applied to the standardized correlation map.
    pub response_gain: P,
    pub response_bias: P,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            featnet: self.featnet.map(f),
            attention: self.attention.map(f),
            controller: self.controller.map(f),
            response_gain: f(&self.response_gain),
            response_bias: f(&self.response_bias),
        }
    }

    /// Visit every parameter in a fixed order with its qualified name.
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        self.featnet.for_each(f);
        self.attention.for_each(f);
        self.controller.for_each(f);
        f("response.gain".into(), &self.response_gain);
        f("response.bias".into(), &self.response_bias);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut P)) {
        self.featnet.for_each_mut(f);
        self.attention.for_each_mut(f);
        self.controller.for_each_mut(f);
        f("response.gain".into(), &mut self.response_gain);
        f("response.bias".into(), &mut self.response_bias);
    }

    pub fn to_vec(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.for_each(&mut |_, p| out.push(p));
        out
    }
}

impl ModelParams<Tensor<f32>> {
    pub fn init<R: Rng + ?Sized>(cfg: &Config, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.featnet.channels();
        let d = cfg.controller.hidden;
        Ok(Self {
            featnet: FeatNetParams::init(&cfg.featnet, rng),
            attention: AttentionParams::init(c, d, rng),
            controller: ControllerParams::init(c, d, rng),
            response_gain: Tensor::scalar(RESPONSE_GAIN_INIT),
            response_bias: Tensor::scalar(0.0),
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.to_vec().iter().map(|t| t.len()).sum()
    }

    /// Place every tensor on `g`, as trainable leaves or as constants.
    pub fn bind<T: Real>(&self, g: &Graph<T>, trainable: bool) -> ModelParams<Var> {
        self.map(&mut |t| {
            let v = t.cast::<T>();
            if trainable {
                g.param(v)
            } else {
                g.constant(v)
            }
        })
    }
}

/// A configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: Config,
    pub params: ModelParams<Tensor<f32>>,
}

impl Model {
    /// Fresh random weights drawn from `config.seed`.
    pub fn new(config: Config) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&config, &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn template_side(&self) -> usize {
        self.config.featnet.template_side().expect("validated config")
    }
}

/// Per-sequence recurrent state: the initial template, the controller
/// state and the memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceState<P> {
    pub initial: P,
    pub controller: ControllerState<P>,
    pub memory: MemoryState<P>,
}

impl<P> SequenceState<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SequenceState<Q> {
        SequenceState {
            initial: f(&self.initial),
            controller: self.controller.map(&mut f),
            memory: self.memory.map(&mut f),
        }
    }
}

impl<T: Real> SequenceState<Tensor<T>> {
    pub fn bind(&self, g: &Graph<T>) -> SequenceState<Var> {
        self.map(|t| g.constant(t.clone()))
    }
}

/// Start a sequence from the first-frame object patch.
pub fn begin<T: Real>(g: &Graph<T>, cfg: &Config, p: &ModelParams<Var>, object_patch: Var) -> Result<SequenceState<Var>> {
    let initial = featnet::extract(g, &cfg.featnet, &p.featnet, object_patch)?;
    let ctrl = controller::init_state(g, &p.controller, initial)?;
    let s = g.shape(initial);
    let mem = MemoryState::<Tensor<T>>::zeros(cfg.memory.slots, s[0], s[2]);
    Ok(SequenceState {
        initial,
        controller: ctrl,
        memory: mem.map(|t| g.constant(t.clone())),
    })
}

/// Everything produced by the read half of a frame.
#[derive(Clone, Debug)]
pub struct ReadOutcome {
    /// Final template `T_0 + r ⊙ T_retr`.
    pub template: Var,
    pub retrieved: Var,
    pub signals: ControlSignals<Var>,
    pub read_weights: Var,
    /// Attention over the search-feature patch grid (absent for `NoAtt`).
    pub attention: Option<Var>,
    pub grid: (usize, usize),
}

/// Attend over the search features, advance the controller and read the
/// final template. Updates `state.controller` and `state.memory.last_read`.
pub fn read_template<T: Real, R: Rng + ?Sized>(
    g: &Graph<T>,
    cfg: &Config,
    p: &ModelParams<Var>,
    state: &mut SequenceState<Var>,
    search_feat: Var,
    training: bool,
    rng: &mut R,
) -> Result<ReadOutcome> {
    let n = g.shape(state.initial)[0];
    let grid = attention::pool_patches(g, search_feat, n)?;
    let (input, alpha) = match cfg.variant {
        Variant::NoAtt => (attention::attend_no_att(g, &grid)?, None),
        _ => {
            let (a, alpha) = attention::attend(g, &grid, state.controller.h, &p.attention)?;
            (a, Some(alpha))
        }
    };
    let (next, out) = controller::step(g, &p.controller, &cfg.controller, input, &state.controller, training, rng)?;
    state.controller = next;
    let signals = controller::emit_signals(g, &p.controller, out)?;

    let slots = state.memory.slots;
    let (retrieved, w_r) = match cfg.variant {
        Variant::Queue => memory::queue_read(g, &state.memory)?,
        Variant::HardRead => {
            let keys = memory::slot_keys(g, slots)?;
            memory::hard_read(g, slots, keys, signals.key)?
        }
        _ => {
            let keys = memory::slot_keys(g, slots)?;
            let w = memory::read_weights(g, keys, signals.key, signals.strength)?;
            (memory::read(g, slots, w)?, w)
        }
    };
    let residual = match cfg.variant {
        Variant::NoRes => g.constant(Tensor::full(g.shape(signals.residual), T::one())),
        _ => signals.residual,
    };
    let template = memory::combine(g, state.initial, retrieved, residual)?;
    state.memory.last_read = w_r;
    Ok(ReadOutcome {
        template,
        retrieved,
        signals,
        read_weights: w_r,
        attention: alpha,
        grid: (grid.rows, grid.cols),
    })
}

/// Write `new` (the template cropped at the current box) into memory.
/// Returns the write weights used.
pub fn write_template<T: Real>(
    g: &Graph<T>,
    cfg: &Config,
    state: &mut SequenceState<Var>,
    read: &ReadOutcome,
    new: Var,
) -> Result<Var> {
    let mem = &state.memory;
    let ww = match cfg.variant {
        Variant::Queue => {
            let next = memory::queue_write(g, mem, new)?;
            let ww = next.last_write;
            state.memory = next;
            ww
        }
        _ => {
            let alloc = g.constant(memory::allocation_weight(&g.value(mem.access)));
            let ww = memory::write_weight(g, read.signals.gates, read.read_weights, alloc)?;
            state.memory.slots = memory::write(g, mem.slots, ww, read.signals.gates, read.signals.decay, new)?;
            state.memory.last_write = ww;
            ww
        }
    };
    state.memory.access = memory::update_access(g, state.memory.access, read.read_weights, ww, cfg.memory.access_decay)?;
    Ok(ww)
}

/// Correlation map of `template` over `search_feat`, standardized to zero
/// mean and unit variance, then scaled and shifted.
pub fn response<T: Real>(g: &Graph<T>, p: &ModelParams<Var>, template: Var, search_feat: Var) -> Result<Var> {
    let raw = featnet::cross_correlate(g, template, search_feat)?;
    let shape = g.shape(raw);
    let flat = g.reshape(raw, &[shape.iter().product()])?;
    let z = g.reshape(g.normalize(flat)?, &shape)?;
    let scaled = g.mul_scalar(z, p.response_gain)?;
    let ones = g.constant(Tensor::full(shape, T::one()));
    g.add(scaled, g.mul_scalar(ones, p.response_bias)?)
}
