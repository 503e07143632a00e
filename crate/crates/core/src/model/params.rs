//! Flat parameter storage with named tensor views.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A `rows x cols` slice of the flat buffer. Vectors have `rows == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIndex {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub p_w1: Tensor,
    pub p_b1: Tensor,
    pub p_w2: Tensor,
    pub p_b2: Tensor,
    pub a_w1: Tensor,
    pub a_b1: Tensor,
    pub a_w2: Tensor,
    pub a_b2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIndex {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub prompt_pos: Tensor,
    pub instr_emb: Tensor,
    pub ego_w: Tensor,
    pub ego_b: Tensor,
    pub tok_emb: Tensor,
    pub act_pos: Tensor,
    pub layers: Vec<LayerIndex>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head_x_w: Tensor,
    pub head_x_b: Tensor,
    pub head_y_w: Tensor,
    pub head_y_b: Tensor,
    pub goal_x_w: Tensor,
    pub goal_x_b: Tensor,
    pub goal_y_w: Tensor,
    pub goal_y_b: Tensor,
    pub total: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    Normal(f64),
}

struct Builder {
    offset: usize,
    inits: Vec<(Tensor, Init)>,
}

impl Builder {
    fn add(&mut self, rows: usize, cols: usize, init: Init) -> Tensor {
        let t = Tensor { offset: self.offset, rows, cols };
        self.offset += rows * cols;
        self.inits.push((t, init));
        t
    }
}

const STD: f64 = 0.02;

fn build(cfg: &ModelConfig) -> (ParamIndex, Vec<(Tensor, Init)>) {
    let d = cfg.embed_dim;
    let mut b = Builder { offset: 0, inits: Vec::new() };
    let out_std = Init::Normal(STD / (2.0 * cfg.layers as f64).sqrt());
    let patch_w = b.add(cfg.feature_dim(), d, Init::Normal(1.0 / (cfg.feature_dim() as f64).sqrt()));
    let patch_b = b.add(1, d, Init::Zero);
    let prompt_pos = b.add(cfg.prompt_len(), d, Init::Normal(STD));
    let instr_emb = b.add(crate::scene::Instruction::COUNT, d, Init::Normal(STD));
    let ego_w = b.add(3, d, Init::Normal(STD));
    let ego_b = b.add(1, d, Init::Zero);
    let tok_emb = b.add(cfg.token_rows(), d, Init::Normal(STD));
    let act_pos = b.add(crate::codec::BLOCK_LEN, d, Init::Normal(STD));
    let (fa_rows, fa) = if cfg.action_expert { (d, cfg.action_ffn_dim) } else { (0, 0) };
    let layers = (0..cfg.layers)
        .map(|_| LayerIndex {
            ln1_g: b.add(1, d, Init::One),
            ln1_b: b.add(1, d, Init::Zero),
            wq: b.add(d, d, Init::Normal(STD)),
            bq: b.add(1, d, Init::Zero),
            wk: b.add(d, d, Init::Normal(STD)),
            bk: b.add(1, d, Init::Zero),
            wv: b.add(d, d, Init::Normal(STD)),
            bv: b.add(1, d, Init::Zero),
            wo: b.add(d, d, out_std),
            bo: b.add(1, d, Init::Zero),
            ln2_g: b.add(1, d, Init::One),
            ln2_b: b.add(1, d, Init::Zero),
            p_w1: b.add(d, cfg.prompt_ffn_dim, Init::Normal(STD)),
            p_b1: b.add(1, cfg.prompt_ffn_dim, Init::Zero),
            p_w2: b.add(cfg.prompt_ffn_dim, d, out_std),
            p_b2: b.add(1, d, Init::Zero),
            a_w1: b.add(fa_rows, fa, Init::Normal(STD)),
            a_b1: b.add(1, fa, Init::Zero),
            a_w2: b.add(fa, fa_rows, out_std),
            a_b2: b.add(1, fa_rows, Init::Zero),
        })
        .collect();
    let idx = ParamIndex {
        patch_w,
        patch_b,
        prompt_pos,
        instr_emb,
        ego_w,
        ego_b,
        tok_emb,
        act_pos,
        layers,
        lnf_g: b.add(1, d, Init::One),
        lnf_b: b.add(1, d, Init::Zero),
        head_x_w: b.add(d, cfg.bins_x, Init::Normal(STD)),
        head_x_b: b.add(1, cfg.bins_x, Init::Zero),
        head_y_w: b.add(d, cfg.bins_y, Init::Normal(STD)),
        head_y_b: b.add(1, cfg.bins_y, Init::Zero),
        goal_x_w: b.add(d, cfg.bins_x, Init::Normal(STD)),
        goal_x_b: b.add(1, cfg.bins_x, Init::Zero),
        goal_y_w: b.add(d, cfg.bins_y, Init::Normal(STD)),
        goal_y_b: b.add(1, cfg.bins_y, Init::Zero),
        total: 0,
    };
    let total = b.offset;
    (ParamIndex { total, ..idx }, b.inits)
}

impl ParamIndex {
    pub fn new(cfg: &ModelConfig) -> Self {
        build(cfg).0
    }
}

/// Model weights plus a version counter that increments on every update;
/// caches built from these weights record the version they saw.
#[derive(Debug, Clone)]
pub struct Params {
    pub config: ModelConfig,
    pub index: ParamIndex,
    pub data: Vec<f64>,
    pub version: u64,
}

impl PartialEq for Params {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl Params {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (index, inits) = build(cfg);
        let mut data = vec![0.0; index.total];
        for (t, init) in inits {
            match init {
                Init::Zero => {}
                Init::One => data[t.range()].fill(1.0),
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("positive std");
                    for v in &mut data[t.range()] {
                        *v = n.sample(rng);
                    }
                }
            }
        }
        Ok(Self { config: cfg.clone(), index, data, version: 0 })
    }

    pub fn from_data(cfg: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let index = ParamIndex::new(cfg);
        if data.len() != index.total {
            return Err(Error::Format(format!("expected {} parameters, got {}", index.total, data.len())));
        }
        Ok(Self { config: cfg.clone(), index, data, version: 0 })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn m(&self, t: Tensor) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((t.rows, t.cols), &self.data[t.range()]).expect("tensor shape")
    }

    pub fn v(&self, t: Tensor) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[t.range()])
    }

    pub fn zero_grads(&self) -> Grads {
        Grads { data: vec![0.0; self.data.len()] }
    }

    /// Marks the weights as changed.
    pub fn bump(&mut self) {
        self.version += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<f64>,
}

impl Grads {
    pub fn m(&mut self, t: Tensor) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((t.rows, t.cols), &mut self.data[t.range()]).expect("tensor shape")
    }

    pub fn v(&mut self, t: Tensor) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[t.range()])
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Vocabulary;
    use crate::rng::SeedTree;

    #[test]
    fn tensors_tile_the_buffer() {
        let cfg = ModelConfig::tiny(&Vocabulary::default());
        let (idx, inits) = build(&cfg);
        let mut covered = vec![false; idx.total];
        for (t, _) in inits {
            for i in t.range() {
                assert!(!covered[i]);
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::tiny(&Vocabulary::default());
        let a = Params::init(&cfg, &mut SeedTree::new(1).rng()).unwrap();
        let b = Params::init(&cfg, &mut SeedTree::new(1).rng()).unwrap();
        assert_eq!(a, b);
        assert!(a.v(a.index.layers[0].ln1_g).iter().all(|&g| g == 1.0));
    }
}
