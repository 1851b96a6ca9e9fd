//! The assembled model: encoder, decoder, structural functions, exogenous
//! prior and supervision heads sharing one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowprior::{ExogenousPrior, PriorKind, DEFAULT_FLOW_LAYERS};
use crate::intervene::{counterfactual_cycle, Codec, DirectionTracker, InterventionSpec};
use crate::numerics::{Activation, Mlp, ParamStore, Tape, Tensor, Var};
use crate::objectives::{
    consistency_loss, hsic_residuals, kl_mc, recon_loss, scm_prior_logprob, sup_loss, total_loss, LossParts,
    LossWeights, SupervisionHeads,
};
use crate::parallel::Exec;
use crate::posterior::{log_density_on_tape, sample_on_tape, EncoderNet, PosteriorVars, ENCODER_HIDDEN};
use crate::scm::{propagate_on_tape, CausalGraph, GraphSpec, LatentBlocks, StructuralFunctions, STRUCTURAL_HIDDEN};

pub const DECODER_HIDDEN: usize = 128;

/// Architecture of a model; together with the parameters it fully determines
/// every forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub graph: GraphSpec,
    pub obs_dim: usize,
    #[serde(default)]
    pub prior: PriorKind,
    #[serde(default = "default_flow_layers")]
    pub flow_layers: usize,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: usize,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: usize,
    #[serde(default = "default_scm_hidden")]
    pub scm_hidden: usize,
}

fn default_flow_layers() -> usize {
    DEFAULT_FLOW_LAYERS
}
fn default_encoder_hidden() -> usize {
    ENCODER_HIDDEN
}
fn default_decoder_hidden() -> usize {
    DECODER_HIDDEN
}
fn default_scm_hidden() -> usize {
    STRUCTURAL_HIDDEN
}

impl ModelSpec {
    pub fn new(graph: &CausalGraph, obs_dim: usize) -> Self {
        ModelSpec {
            graph: graph.to_spec(),
            obs_dim,
            prior: PriorKind::Flow,
            flow_layers: DEFAULT_FLOW_LAYERS,
            encoder_hidden: ENCODER_HIDDEN,
            decoder_hidden: DECODER_HIDDEN,
            scm_hidden: STRUCTURAL_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexCausal {
    pub spec: ModelSpec,
    pub graph: CausalGraph,
    pub store: ParamStore,
    pub encoder: EncoderNet,
    pub decoder: Mlp,
    pub scm: StructuralFunctions,
    pub prior: ExogenousPrior,
    pub heads: SupervisionHeads,
}

/// Scalar values of every loss component of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub recon: f64,
    pub kl: f64,
    pub sup: f64,
    /// 0 when the step had no counterfactual.
    pub cons: f64,
    pub hsic: f64,
    pub total: f64,
}

/// Encoder output and posterior sample of a batch.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub x: Var,
    pub post: PosteriorVars,
    pub z: Var,
}

/// Tag non-finite failures with the loss component that produced them.
fn named<T>(component: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{component} ({op})")),
        other => other,
    })
}

impl FlexCausal {
    pub fn new<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let graph = CausalGraph::from_spec(&spec.graph)?;
        if spec.obs_dim == 0 {
            return Err(Error::Config("observation dimension must be positive".into()));
        }
        if spec.flow_layers == 0 && spec.prior == PriorKind::Flow {
            return Err(Error::Config("flow prior needs at least one layer".into()));
        }
        let mut store = ParamStore::new();
        let encoder = EncoderNet::new(&mut store, spec.obs_dim, spec.encoder_hidden, graph.dims(), rng)?;
        let decoder = Mlp::new(
            &mut store,
            "decoder",
            &[graph.total_dim(), spec.decoder_hidden, spec.decoder_hidden, spec.obs_dim],
            Activation::LeakyRelu,
            false,
            rng,
        );
        let scm = StructuralFunctions::new(&mut store, &graph, spec.scm_hidden, rng);
        let prior = ExogenousPrior::new(spec.prior, &mut store, graph.dims(), spec.flow_layers, rng);
        let heads = SupervisionHeads::new(&mut store, graph.dims(), rng);
        Ok(FlexCausal {
            spec,
            graph,
            store,
            encoder,
            decoder,
            scm,
            prior,
            heads,
        })
    }

    pub fn num_concepts(&self) -> usize {
        self.graph.len()
    }

    /// Encode `x` and draw `z = mu + L eps`.
    pub fn encode_sample(&self, tape: &mut Tape, x: &Tensor, eps: &Tensor) -> Result<Encoded> {
        let xv = tape.constant(x.clone());
        let post = named("encoder", self.encoder.forward(tape, &self.store, xv))?;
        let z = named("posterior sample", sample_on_tape(tape, &self.encoder.layout, post, eps))?;
        Ok(Encoded { x: xv, post, z })
    }

    /// Every loss of a batch after encoding. `cf` requests a counterfactual
    /// cycle; its direction must be initialized in `tracker`.
    pub fn losses(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        eps: &Tensor,
        u: &Tensor,
        cf: Option<(InterventionSpec, &DirectionTracker)>,
        w: &LossWeights,
    ) -> Result<(Var, LossParts)> {
        let mech = self.scm.bind(&self.store);
        let x_hat = named("decoder", self.decoder.forward(tape, &self.store, enc.z))?;
        let recon = named("recon", recon_loss(tape, enc.x, x_hat))?;
        let log_q = named("kl", log_density_on_tape(tape, &self.encoder.layout, enc.post, eps))?;
        let (log_p, n) = named(
            "kl",
            scm_prior_logprob(tape, &self.store, &self.graph, &mech, &self.prior, enc.z),
        )?;
        let kl = named("kl", kl_mc(tape, log_q, log_p))?;
        let readouts = named("sup", self.heads.forward(tape, &self.store, &self.graph, enc.z))?;
        let sup = named("sup", sup_loss(tape, readouts, u))?;
        let hsic = if w.nu != 0.0 {
            named("hsic", hsic_residuals(tape, &self.graph, n))?
        } else {
            tape.scalar(0.0)
        };
        let cons = match cf {
            Some((spec, tracker)) if w.lambda != 0.0 => {
                let cyc = named(
                    "cons",
                    counterfactual_cycle(tape, self, &self.graph, &mech, enc.z, spec, tracker),
                )?;
                let part = self.graph.partition(spec.target)?;
                Some(named(
                    "cons",
                    consistency_loss(tape, &self.graph, enc.z, cyc.z_tilde, cyc.z_hat, &part, w.into()),
                )?)
            }
            _ => None,
        };
        let parts = LossParts {
            recon,
            kl,
            sup,
            cons,
            hsic,
        };
        let total = named("total", total_loss(tape, &parts, w))?;
        Ok((total, parts))
    }

    pub fn loss_values(tape: &Tape, total: Var, parts: &LossParts) -> LossValues {
        LossValues {
            recon: tape.value(parts.recon).item(),
            kl: tape.value(parts.kl).item(),
            sup: tape.value(parts.sup).item(),
            cons: parts.cons.map_or(0.0, |c| tape.value(c).item()),
            hsic: tape.value(parts.hsic).item(),
            total: tape.value(total).item(),
        }
    }

    /// Posterior means `[N, D]`, evaluated in row chunks.
    pub fn encode_means(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        self.chunked(x, self.graph.total_dim(), exec, |m, chunk| m.encoder.encode_mean(&m.store, chunk))
    }

    pub fn decode_values(&self, z: &Tensor, exec: Exec) -> Result<Tensor> {
        self.chunked(z, self.spec.obs_dim, exec, |m, chunk| {
            let mut tape = Tape::new();
            let zv = tape.constant(chunk.clone());
            let out = m.decoder.forward(&mut tape, &m.store, zv)?;
            Ok(tape.value(out).clone())
        })
    }

    /// `[N, K]` supervised readouts `h_k(z_k)`.
    pub fn readouts(&self, z: &Tensor) -> Result<Tensor> {
        self.heads.readouts(&self.store, &self.graph, z)
    }

    /// Ancestral samples `[count, D]`: exogenous noise from the prior pushed
    /// through the structural functions.
    pub fn sample_prior<R: Rng>(&self, count: usize, rng: &mut R) -> Result<Tensor> {
        let blocks = (0..self.graph.len())
            .map(|k| self.prior.sample(&self.store, k, count, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = blocks.into_iter().map(|b| tape.constant(b)).collect();
        let n = tape.concat_cols(&vars)?;
        let mech = self.scm.bind(&self.store);
        let z = propagate_on_tape(&mut tape, &self.graph, &mech, n)?;
        Ok(tape.value(z).clone())
    }

    pub fn latent_blocks(&self, z: Tensor) -> Result<LatentBlocks> {
        LatentBlocks::new(z, self.graph.dims())
    }

    fn chunked<F>(&self, input: &Tensor, out_cols: usize, exec: Exec, f: F) -> Result<Tensor>
    where
        F: Fn(&Self, &Tensor) -> Result<Tensor> + Send + Sync,
    {
        const CHUNK: usize = 256;
        let n = input.rows();
        let chunks = n.div_ceil(CHUNK);
        let parts = exec.map_indexed(chunks, |c| {
            let rows: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
            f(self, &input.select_rows(&rows))
        });
        let mut data = Vec::with_capacity(n * out_cols);
        for p in parts {
            data.extend_from_slice(p?.data());
        }
        Tensor::matrix(n, out_cols, data)
    }
}

impl Codec for FlexCausal {
    fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.decoder.forward(tape, &self.store, z)
    }

    fn encode_mean(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encoder.mean_on_tape(tape, &self.store, x)
    }
}
