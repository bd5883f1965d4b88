//! Model assembly: configuration, parameter initialization, canonical
//! parameter naming, and the end-to-end forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{mhga, mhla, AttnParams, BlockParams, MlpParams, PoolMode, PoolParams, WindowSpec};
use crate::embedding::{assemble, project, ClipFeatures, EmbedParams, TokenGrid};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Full architectural description of a model. Two configs with equal fields
/// produce bit-identical models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub window: WindowSpec,
    pub pool_mode: PoolMode,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale geometry used by the CLI when no config file is
    /// given.
    pub fn desk_default() -> Self {
        ModelConfig {
            frames: 8,
            height: 4,
            width: 4,
            channels: 16,
            embed_dim: 64,
            blocks: 2,
            heads: 8,
            window: WindowSpec::new(2, 2, 2),
            pool_mode: PoolMode::Average,
            num_classes: 7,
            seed: 42,
        }
    }

    /// Smallest config that still exercises every code path; used by the
    /// gradient checker.
    pub fn tiny() -> Self {
        ModelConfig {
            frames: 2,
            height: 2,
            width: 2,
            channels: 3,
            embed_dim: 8,
            blocks: 1,
            heads: 2,
            window: WindowSpec::new(1, 2, 2),
            pool_mode: PoolMode::Average,
            num_classes: 3,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        self.window.validate(self.frames, self.height, self.width)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn grid_len(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// Which parameters a traced copy registers on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trace {
    None,
    All,
    HeadOnly,
}

impl Trace {
    fn covers(self, name: &str) -> bool {
        match self {
            Trace::None => false,
            Trace::All => true,
            Trace::HeadOnly => name.starts_with("head."),
        }
    }
}

/// Logits and the final classification-token embedding of one clip.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[num_classes]`
    pub logits: Tensor,
    /// `[embed_dim]`
    pub cls: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: EmbedParams,
    pub blocks: Vec<BlockParams>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape/data mismatch in init")
}

fn small_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let dist = Normal::new(0.0, 0.02).expect("valid normal");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape/data mismatch in init")
}

impl Model {
    /// Builds a model with freshly initialized parameters. The same config
    /// (seed included) always produces bit-identical parameters: random
    /// draws happen in the fixed parameter order.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let hd = config.head_dim();
        let hw = config.height * config.width;

        let embed = EmbedParams {
            proj_weight: uniform(&mut rng, vec![config.channels, d], config.channels),
            proj_bias: Tensor::zeros(vec![d])?,
            spatial_pe: small_normal(&mut rng, vec![hw, d]),
            temporal_pe: small_normal(&mut rng, vec![config.frames, d]),
            cls_token: small_normal(&mut rng, vec![d]),
            cls_pe: small_normal(&mut rng, vec![d]),
        };

        let attn = |rng: &mut ChaCha8Rng| -> Result<AttnParams> {
            Ok(AttnParams {
                query: (0..config.heads).map(|_| uniform(rng, vec![d, hd], d)).collect(),
                key: (0..config.heads).map(|_| uniform(rng, vec![d, hd], d)).collect(),
                value: (0..config.heads).map(|_| uniform(rng, vec![d, hd], d)).collect(),
                output: uniform(rng, vec![d, d], d),
                ln_gain: Tensor::filled(vec![d], 1.0)?,
                ln_bias: Tensor::zeros(vec![d])?,
            })
        };

        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let local = attn(&mut rng)?;
            let global = attn(&mut rng)?;
            let pool = match config.pool_mode {
                PoolMode::Average => PoolParams::Average,
                PoolMode::Learned => {
                    let fan = config.window.volume() * d;
                    PoolParams::Learned {
                        weight: uniform(&mut rng, vec![fan, d], fan),
                        bias: Tensor::zeros(vec![d])?,
                    }
                }
            };
            let mlp = MlpParams {
                w1: uniform(&mut rng, vec![d, 4 * d], d),
                b1: Tensor::zeros(vec![4 * d])?,
                w2: uniform(&mut rng, vec![4 * d, d], 4 * d),
                b2: Tensor::zeros(vec![d])?,
                ln_gain: Tensor::filled(vec![d], 1.0)?,
                ln_bias: Tensor::zeros(vec![d])?,
            };
            blocks.push(BlockParams { local, global, pool, mlp });
        }

        let head_weight = uniform(&mut rng, vec![d, config.num_classes], d);
        let head_bias = Tensor::zeros(vec![config.num_classes])?;

        Ok(Model {
            config,
            embed,
            blocks,
            head_weight,
            head_bias,
        })
    }

    /// Every parameter with its canonical name, in a fixed order shared
    /// with [`named_params_mut`](Self::named_params_mut).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.proj_weight".into(), &self.embed.proj_weight),
            ("embed.proj_bias".into(), &self.embed.proj_bias),
            ("embed.spatial_pe".into(), &self.embed.spatial_pe),
            ("embed.temporal_pe".into(), &self.embed.temporal_pe),
            ("embed.cls_token".into(), &self.embed.cls_token),
            ("embed.cls_pe".into(), &self.embed.cls_pe),
        ];
        for (k, block) in self.blocks.iter().enumerate() {
            for (stage, attn) in [("local", &block.local), ("global", &block.global)] {
                for (h, t) in attn.query.iter().enumerate() {
                    out.push((format!("blocks.{k}.{stage}.q.{h}"), t));
                }
                for (h, t) in attn.key.iter().enumerate() {
                    out.push((format!("blocks.{k}.{stage}.k.{h}"), t));
                }
                for (h, t) in attn.value.iter().enumerate() {
                    out.push((format!("blocks.{k}.{stage}.v.{h}"), t));
                }
                out.push((format!("blocks.{k}.{stage}.out"), &attn.output));
                out.push((format!("blocks.{k}.{stage}.ln_gain"), &attn.ln_gain));
                out.push((format!("blocks.{k}.{stage}.ln_bias"), &attn.ln_bias));
            }
            if let PoolParams::Learned { weight, bias } = &block.pool {
                out.push((format!("blocks.{k}.pool.weight"), weight));
                out.push((format!("blocks.{k}.pool.bias"), bias));
            }
            out.push((format!("blocks.{k}.mlp.w1"), &block.mlp.w1));
            out.push((format!("blocks.{k}.mlp.b1"), &block.mlp.b1));
            out.push((format!("blocks.{k}.mlp.w2"), &block.mlp.w2));
            out.push((format!("blocks.{k}.mlp.b2"), &block.mlp.b2));
            out.push((format!("blocks.{k}.mlp.ln_gain"), &block.mlp.ln_gain));
            out.push((format!("blocks.{k}.mlp.ln_bias"), &block.mlp.ln_bias));
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Mutable view of every parameter, same names and order as
    /// [`named_params`](Self::named_params).
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed.proj_weight".into(), &mut self.embed.proj_weight),
            ("embed.proj_bias".into(), &mut self.embed.proj_bias),
            ("embed.spatial_pe".into(), &mut self.embed.spatial_pe),
            ("embed.temporal_pe".into(), &mut self.embed.temporal_pe),
            ("embed.cls_token".into(), &mut self.embed.cls_token),
            ("embed.cls_pe".into(), &mut self.embed.cls_pe),
        ];
        for (k, block) in self.blocks.iter_mut().enumerate() {
            for (stage, attn) in [("local", &mut block.local), ("global", &mut block.global)] {
                for (h, t) in attn.query.iter_mut().enumerate() {
                    out.push((format!("blocks.{k}.{stage}.q.{h}"), t));
                }
                for (h, t) in attn.key.iter_mut().enumerate() {
                    out.push((format!("blocks.{k}.{stage}.k.{h}"), t));
                }
                for (h, t) in attn.value.iter_mut().enumerate() {
                    out.push((format!("blocks.{k}.{stage}.v.{h}"), t));
                }
                out.push((format!("blocks.{k}.{stage}.out"), &mut attn.output));
                out.push((format!("blocks.{k}.{stage}.ln_gain"), &mut attn.ln_gain));
                out.push((format!("blocks.{k}.{stage}.ln_bias"), &mut attn.ln_bias));
            }
            if let PoolParams::Learned { weight, bias } = &mut block.pool {
                out.push((format!("blocks.{k}.pool.weight"), weight));
                out.push((format!("blocks.{k}.pool.bias"), bias));
            }
            out.push((format!("blocks.{k}.mlp.w1"), &mut block.mlp.w1));
            out.push((format!("blocks.{k}.mlp.b1"), &mut block.mlp.b1));
            out.push((format!("blocks.{k}.mlp.w2"), &mut block.mlp.w2));
            out.push((format!("blocks.{k}.mlp.b2"), &mut block.mlp.b2));
            out.push((format!("blocks.{k}.mlp.ln_gain"), &mut block.mlp.ln_gain));
            out.push((format!("blocks.{k}.mlp.ln_bias"), &mut block.mlp.ln_bias));
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Clone whose selected parameters are registered as gradient leaves on
    /// `tape`; forward passes through the copy can then be differentiated
    /// with respect to those parameters.
    pub fn traced_copy(&self, tape: &mut Tape, trace: Trace) -> Result<Model> {
        let mut copy = self.clone();
        for (name, t) in copy.named_params_mut() {
            if trace.covers(&name) {
                *t = tape.leaf(t)?;
            }
        }
        Ok(copy)
    }

    /// Runs one clip through the network and returns its logits and final
    /// classification-token embedding.
    pub fn forward(&self, tape: &mut Tape, clip: &ClipFeatures) -> Result<ForwardOutput> {
        let c = &self.config;
        if (clip.frames(), clip.height(), clip.width(), clip.channels())
            != (c.frames, c.height, c.width, c.channels)
        {
            return Err(Error::Dimension {
                op: "forward",
                lhs: clip.features().shape().to_vec(),
                rhs: vec![c.frames, c.height, c.width, c.channels],
            });
        }
        let projected = project(tape, clip, &self.embed)?;
        let mut grid = assemble(tape, &projected, &self.embed, c.height, c.width)?;
        for block in &self.blocks {
            grid = mhla(tape, &grid, block, &c.window)?;
            grid = mhga(tape, &grid, block, &c.window)?;
        }
        let cls_row = tape.select_rows(&grid.tokens, &[TokenGrid::CLS_INDEX])?;
        let logits = tape.matmul(&cls_row, &self.head_weight)?;
        let logits = tape.add_row_vec(&logits, &self.head_bias)?;
        let logits = tape.reshape(&logits, vec![c.num_classes])?;
        let cls = tape.reshape(&cls_row, vec![c.embed_dim])?;
        Ok(ForwardOutput { logits, cls })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_clip(config: &ModelConfig, seed: u64) -> ClipFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = vec![config.frames, config.height, config.width, config.channels];
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ClipFeatures::new(Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::init(ModelConfig::tiny()).unwrap();
        let b = Model::init(ModelConfig::tiny()).unwrap();
        for ((na, ta), (nb, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na}");
        }

        let mut other = ModelConfig::tiny();
        other.seed = 43;
        let c = Model::init(other).unwrap();
        assert_ne!(
            a.embed.proj_weight.data(),
            c.embed.proj_weight.data(),
            "different seeds must give different draws"
        );
    }

    #[test]
    fn named_params_cover_both_views_in_the_same_order() {
        let mut m = Model::init(ModelConfig::desk_default()).unwrap();
        let names: Vec<String> = m.named_params().iter().map(|(n, _)| n.clone()).collect();
        let names_mut: Vec<String> = m.named_params_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"blocks.1.global.q.7".to_string()));
        assert!(names.contains(&"embed.cls_token".to_string()));
        assert!(!names.contains(&"blocks.0.pool.weight".to_string()));
    }

    #[test]
    fn learned_pool_adds_named_params() {
        let mut config = ModelConfig::tiny();
        config.pool_mode = PoolMode::Learned;
        let m = Model::init(config).unwrap();
        let names: Vec<String> = m.named_params().iter().map(|(n, _)| n.clone()).collect();
        assert!(names.contains(&"blocks.0.pool.weight".to_string()));
        assert!(names.contains(&"blocks.0.pool.bias".to_string()));
        let (_, w) = m
            .named_params()
            .into_iter()
            .find(|(n, _)| n == "blocks.0.pool.weight")
            .unwrap();
        assert_eq!(w.shape(), &[4 * 8, 8]);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let config = ModelConfig::tiny();
        let model = Model::init(config.clone()).unwrap();
        let clip = random_clip(&config, 5);
        let mut tape = Tape::new();
        let out1 = model.forward(&mut tape, &clip).unwrap();
        assert_eq!(out1.logits.shape(), &[3]);
        assert_eq!(out1.cls.shape(), &[8]);
        let mut tape2 = Tape::new();
        let out2 = model.forward(&mut tape2, &clip).unwrap();
        assert_eq!(out1.logits.data(), out2.logits.data());
        assert!(out1.logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_mismatched_clip() {
        let model = Model::init(ModelConfig::tiny()).unwrap();
        let mut bad = ModelConfig::tiny();
        bad.frames = 4;
        let clip = random_clip(&bad, 5);
        assert!(matches!(
            model.forward(&mut Tape::new(), &clip),
            Err(Error::Dimension { op: "forward", .. })
        ));
    }

    #[test]
    fn trace_scopes_select_the_right_leaves() {
        let model = Model::init(ModelConfig::tiny()).unwrap();

        let mut tape = Tape::new();
        let all = model.traced_copy(&mut tape, Trace::All).unwrap();
        assert!(all.named_params().iter().all(|(_, t)| t.grad_id().is_some()));

        let mut tape = Tape::new();
        let none = model.traced_copy(&mut tape, Trace::None).unwrap();
        assert!(none.named_params().iter().all(|(_, t)| t.grad_id().is_none()));
        assert!(tape.is_empty());

        let mut tape = Tape::new();
        let head = model.traced_copy(&mut tape, Trace::HeadOnly).unwrap();
        for (name, t) in head.named_params() {
            assert_eq!(t.grad_id().is_some(), name.starts_with("head."), "{name}");
        }
        assert_eq!(tape.len(), 2);
    }

    #[test]
    fn forward_mac_count_matches_closed_form() {
        let config = ModelConfig::tiny();
        let model = Model::init(config.clone()).unwrap();
        let clip = random_clip(&config, 9);
        let mut tape = Tape::new();
        model.forward(&mut tape, &clip).unwrap();

        let d = config.embed_dim as u64;
        let n = config.grid_len() as u64;
        let fhw = config.window.volume() as u64;
        let t = n + 1;
        let p = n / fhw + 1;
        let proj = n * config.channels as u64 * d;
        let local = 4 * n * d * d + 2 * n * fhw * d;
        let global = 10 * t * d * d + 2 * p * d * d + 2 * t * p * d;
        let head = d * config.num_classes as u64;
        let expected = proj + config.blocks as u64 * (local + global) + head;
        assert_eq!(tape.cost().mac_count, expected);
        assert_eq!(tape.cost().mac_count, 9352);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(c.validate().is_err(), "embed_dim 8 not divisible by 3");

        let mut c = ModelConfig::tiny();
        c.window = WindowSpec::new(2, 2, 3);
        assert!(matches!(c.validate(), Err(Error::Window { axis: "width", .. })));

        let mut c = ModelConfig::tiny();
        c.num_classes = 1;
        assert!(c.validate().is_err());
    }
}
