//! Feed-forward blocks for the transformer: a plain MLP and five
//! Kolmogorov-Arnold variants. All blocks share one interface so the encoder
//! and the classification head can swap them freely.

use thiserror::Error;

use crate::basis::uniform_knots;
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor, TensorError, UnaryKind};

#[derive(Debug, Error)]
pub enum KanError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("unknown block kind: {0}")]
    UnknownKind(String),
    #[error("block expects {expected} parameter nodes, got {got}")]
    ParamArity { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BlockKind {
    Mlp,
    EfficientKan,
    FastKan,
    FasterKan,
    WavKan,
    ChebyKan,
}

impl BlockKind {
    pub const ALL: [BlockKind; 6] = [
        BlockKind::Mlp,
        BlockKind::EfficientKan,
        BlockKind::FastKan,
        BlockKind::FasterKan,
        BlockKind::WavKan,
        BlockKind::ChebyKan,
    ];

    pub fn parse(s: &str) -> Result<Self, KanError> {
        match s {
            "mlp" => Ok(BlockKind::Mlp),
            "efficient-kan" => Ok(BlockKind::EfficientKan),
            "fast-kan" => Ok(BlockKind::FastKan),
            "faster-kan" => Ok(BlockKind::FasterKan),
            "wav-kan" => Ok(BlockKind::WavKan),
            "cheby-kan" => Ok(BlockKind::ChebyKan),
            other => Err(KanError::UnknownKind(other.into())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlockKind::Mlp => "mlp",
            BlockKind::EfficientKan => "efficient-kan",
            BlockKind::FastKan => "fast-kan",
            BlockKind::FasterKan => "faster-kan",
            BlockKind::WavKan => "wav-kan",
            BlockKind::ChebyKan => "cheby-kan",
        }
    }
}

/// Shared hyperparameters for the function bases.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BasisConfig {
    pub grid_size: usize,
    pub spline_order: usize,
    pub cheb_degree: usize,
    pub input_range: (f64, f64),
    pub mlp_expansion: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            grid_size: 8,
            spline_order: 3,
            cheb_degree: 4,
            input_range: (-2.0, 2.0),
            mlp_expansion: 2,
        }
    }
}

/// Where a block sits; the MLP variant is a two-layer bottleneck as an
/// encoder feed-forward but a single linear as the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    FeedForward,
    Head,
}

/// One feed-forward block with its owned parameters.
#[derive(Debug, Clone)]
pub struct Block {
    pub kind: BlockKind,
    pub role: BlockRole,
    pub d_in: usize,
    pub d_out: usize,
    pub cfg: BasisConfig,
    params: Vec<(String, Tensor)>,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(a + b) / 2.0];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

impl Block {
    pub fn new(
        kind: BlockKind,
        role: BlockRole,
        d_in: usize,
        d_out: usize,
        cfg: &BasisConfig,
        rng: &mut Rng,
    ) -> Self {
        let g = cfg.grid_size;
        let (a, b) = cfg.input_range;
        let scale = 1.0 / (d_in as f64).sqrt();
        let mut params: Vec<(String, Tensor)> = Vec::new();
        let mut p = |name: &str, t: Tensor| params.push((name.into(), t));
        match (kind, role) {
            (BlockKind::Mlp, BlockRole::FeedForward) => {
                let hidden = cfg.mlp_expansion * d_in;
                p("w1", Tensor::rand_uniform(&[d_in, hidden], scale, rng));
                p("b1", Tensor::zeros(&[1, hidden]));
                p(
                    "w2",
                    Tensor::rand_uniform(&[hidden, d_out], 1.0 / (hidden as f64).sqrt(), rng),
                );
                p("b2", Tensor::zeros(&[1, d_out]));
            }
            (BlockKind::Mlp, BlockRole::Head) => {
                p("w", Tensor::rand_uniform(&[d_in, d_out], scale, rng));
                p("b", Tensor::zeros(&[1, d_out]));
            }
            (BlockKind::EfficientKan, _) => {
                let nb = g + cfg.spline_order - 1;
                p(
                    "spline_w",
                    Tensor::rand_uniform(&[d_in * nb, d_out], scale / (nb as f64).sqrt(), rng),
                );
                p("base_w", Tensor::rand_uniform(&[d_in, d_out], scale, rng));
                p("bias", Tensor::zeros(&[1, d_out]));
            }
            (BlockKind::FastKan, _) => {
                p("ln_gamma", Tensor::filled(&[1, d_in], 1.0));
                p("ln_beta", Tensor::zeros(&[1, d_in]));
                p("centers", Tensor::from_vec(&[g], linspace(a, b, g)).unwrap());
                p("width", Tensor::scalar((b - a) / (g.max(2) - 1) as f64));
                p(
                    "w",
                    Tensor::rand_uniform(&[d_in * g, d_out], scale / (g as f64).sqrt(), rng),
                );
                p("b", Tensor::zeros(&[1, d_out]));
            }
            (BlockKind::FasterKan, _) => {
                p("centers", Tensor::from_vec(&[g], linspace(a, b, g)).unwrap());
                p("width", Tensor::scalar((b - a) / (g.max(2) - 1) as f64));
                p(
                    "w",
                    Tensor::rand_uniform(&[d_in * g, d_out], scale / (g as f64).sqrt(), rng),
                );
                p("b", Tensor::zeros(&[1, d_out]));
            }
            (BlockKind::WavKan, _) => {
                p("ln_gamma", Tensor::filled(&[1, d_in], 1.0));
                p("ln_beta", Tensor::zeros(&[1, d_in]));
                p("wav_w", Tensor::rand_uniform(&[d_out, d_in], scale, rng));
                p("wav_t", Tensor::rand_uniform(&[d_out, d_in], 1.0, rng));
                // softplus(0.5413) ~= 1.0, so scales start near unit width
                p("wav_s", Tensor::filled(&[d_out, d_in], 0.5413));
                p("base_w", Tensor::rand_uniform(&[d_in, d_out], scale, rng));
                p("bias", Tensor::zeros(&[1, d_out]));
                p("out_scale", Tensor::filled(&[1, d_out], 1.0));
                p("out_shift", Tensor::zeros(&[1, d_out]));
            }
            (BlockKind::ChebyKan, _) => {
                let nb = cfg.cheb_degree + 1;
                p(
                    "coeff",
                    Tensor::rand_uniform(&[d_in * nb, d_out], scale / (nb as f64).sqrt(), rng),
                );
            }
        }
        Block {
            kind,
            role,
            d_in,
            d_out,
            cfg: cfg.clone(),
            params,
        }
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register all parameters as graph leaves (in declaration order).
    pub fn register(&self, g: &mut Graph, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|(_, t)| g.input(t.clone(), requires_grad))
            .collect()
    }

    /// Forward through the block; `ids` must come from `register` on the
    /// same graph.
    pub fn forward(&self, g: &mut Graph, x: NodeId, ids: &[NodeId]) -> Result<NodeId, KanError> {
        if ids.len() != self.params.len() {
            return Err(KanError::ParamArity {
                expected: self.params.len(),
                got: ids.len(),
            });
        }
        let out = match (self.kind, self.role) {
            (BlockKind::Mlp, BlockRole::FeedForward) => {
                let h = g.matmul(x, ids[0])?;
                let h = g.add(h, ids[1])?;
                let h = g.unary(h, UnaryKind::Gelu);
                let y = g.matmul(h, ids[2])?;
                g.add(y, ids[3])?
            }
            (BlockKind::Mlp, BlockRole::Head) => {
                let y = g.matmul(x, ids[0])?;
                g.add(y, ids[1])?
            }
            (BlockKind::EfficientKan, _) => {
                let (a, b) = self.cfg.input_range;
                let knots = uniform_knots(a, b, self.cfg.grid_size, self.cfg.spline_order);
                let basis = g.spline_basis(x, knots, self.cfg.spline_order);
                let spline = g.matmul(basis, ids[0])?;
                let silu = g.unary(x, UnaryKind::Silu);
                let base = g.matmul(silu, ids[1])?;
                let y = g.add(spline, base)?;
                g.add(y, ids[2])?
            }
            (BlockKind::FastKan, _) => {
                let ln = g.layer_norm(x, ids[0], ids[1], 1e-5)?;
                let basis = g.rbf_basis(ln, ids[2], ids[3])?;
                let y = g.matmul(basis, ids[4])?;
                g.add(y, ids[5])?
            }
            (BlockKind::FasterKan, _) => {
                let basis = g.switch_basis(x, ids[0], ids[1])?;
                let y = g.matmul(basis, ids[2])?;
                g.add(y, ids[3])?
            }
            (BlockKind::WavKan, _) => {
                let ln = g.layer_norm(x, ids[0], ids[1], 1e-5)?;
                let wav = g.wavelet_edges(ln, ids[2], ids[3], ids[4])?;
                let silu = g.unary(ln, UnaryKind::Silu);
                let base = g.matmul(silu, ids[5])?;
                let y = g.add(wav, base)?;
                let y = g.add(y, ids[6])?;
                let y = g.mul(y, ids[7])?;
                g.add(y, ids[8])?
            }
            (BlockKind::ChebyKan, _) => {
                let z = g.unary(x, UnaryKind::Tanh);
                let basis = g.cheb_basis(z, self.cfg.cheb_degree);
                g.matmul(basis, ids[0])?
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::max_rel_error;

    fn cfg() -> BasisConfig {
        BasisConfig::default()
    }

    #[test]
    fn mlp_ffn_param_count_example() {
        let mut rng = Rng::new(1);
        let b = Block::new(BlockKind::Mlp, BlockRole::FeedForward, 4, 4, &cfg(), &mut rng);
        assert_eq!(b.param_count(), 76);
    }

    #[test]
    fn cheby_param_count_example() {
        let mut rng = Rng::new(1);
        let b = Block::new(BlockKind::ChebyKan, BlockRole::FeedForward, 2, 3, &cfg(), &mut rng);
        assert_eq!(b.param_count(), 30);
    }

    #[test]
    fn param_counts_match_formulas() {
        let mut rng = Rng::new(2);
        let c = cfg();
        let (din, dout, g) = (6, 5, c.grid_size);
        let nb = g + c.spline_order - 1;
        let expect = |kind: BlockKind| -> usize {
            match kind {
                BlockKind::Mlp => {
                    let h = c.mlp_expansion * din;
                    din * h + h + h * dout + dout
                }
                BlockKind::EfficientKan => din * nb * dout + din * dout + dout,
                BlockKind::FastKan => 2 * din + g + 1 + din * g * dout + dout,
                BlockKind::FasterKan => g + 1 + din * g * dout + dout,
                BlockKind::WavKan => 2 * din + 3 * din * dout + din * dout + dout + 2 * dout,
                BlockKind::ChebyKan => din * (c.cheb_degree + 1) * dout,
            }
        };
        for kind in BlockKind::ALL {
            let b = Block::new(kind, BlockRole::FeedForward, din, dout, &c, &mut rng);
            assert_eq!(b.param_count(), expect(kind), "{kind:?}");
            // count equals the walk over named entries
            let walked: usize = b.params().iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(b.param_count(), walked);
        }
    }

    #[test]
    fn kan_blocks_out_param_mlp_baseline_at_fixed_dims() {
        let mut rng = Rng::new(3);
        let c = cfg();
        let d = 32;
        let mlp = Block::new(BlockKind::Mlp, BlockRole::FeedForward, d, d, &c, &mut rng);
        for kind in BlockKind::ALL.into_iter().filter(|k| *k != BlockKind::Mlp) {
            let b = Block::new(kind, BlockRole::FeedForward, d, d, &c, &mut rng);
            assert!(
                b.param_count() > mlp.param_count(),
                "{kind:?}: {} <= {}",
                b.param_count(),
                mlp.param_count()
            );
        }
    }

    #[test]
    fn forward_shapes() {
        let mut rng = Rng::new(4);
        let c = cfg();
        for kind in BlockKind::ALL {
            for role in [BlockRole::FeedForward, BlockRole::Head] {
                let b = Block::new(kind, role, 5, 3, &c, &mut rng);
                let mut graph = Graph::new();
                let x = graph.input(Tensor::rand_uniform(&[7, 5], 1.0, &mut rng), false);
                let ids = b.register(&mut graph, false);
                let y = b.forward(&mut graph, x, &ids).unwrap();
                assert_eq!(graph.value(y).shape(), &[7, 3], "{kind:?} {role:?}");
            }
        }
    }

    #[test]
    fn all_blocks_pass_gradcheck() {
        let mut rng = Rng::new(5);
        let c = cfg();
        for kind in BlockKind::ALL {
            let b = Block::new(kind, BlockRole::FeedForward, 3, 2, &c, &mut rng);
            let x = Tensor::rand_uniform(&[4, 3], 1.0, &mut rng);
            let mut inputs = vec![x];
            inputs.extend(b.params().iter().map(|(_, t)| t.clone()));
            let block = b.clone();
            let err = max_rel_error(
                &inputs,
                &move |g, ids| {
                    let y = block.forward(g, ids[0], &ids[1..]).unwrap();
                    let sq = g.unary(y, UnaryKind::Square);
                    g.sum_all(sq)
                },
                1e-5,
            );
            assert!(err <= 1e-4, "{kind:?}: rel err {err}");
        }
    }

    #[test]
    fn kind_parse_round_trip() {
        for kind in BlockKind::ALL {
            assert_eq!(BlockKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(BlockKind::parse("spline").is_err());
    }

    #[test]
    fn deterministic_init() {
        let c = cfg();
        let a = Block::new(BlockKind::WavKan, BlockRole::FeedForward, 4, 4, &c, &mut Rng::new(9));
        let b = Block::new(BlockKind::WavKan, BlockRole::FeedForward, 4, 4, &c, &mut Rng::new(9));
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params()) {
            assert_eq!(ta.data(), tb.data());
        }
    }
}
