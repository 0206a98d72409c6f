//! Parameters and forward graph: backbone, multi-scale aggregation, and the
//! detector, grasp and relation heads.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackgrasp_core::{box_intersection, box_union, ObjectBox, RgbImage};
use stackgrasp_tensor::{ParamStore, Scalar, Tape, Tensor, TensorError, Var};

use crate::config::ModelConfig;

type R<T> = Result<T, TensorError>;

/// Initial background logit of the detector, so an untrained model is quiet.
pub const DETECTOR_BG_BIAS: f64 = 4.0;
/// Initial confidence logit of every grasp anchor.
pub const GRASP_CONF_BIAS: f64 = -4.0;

pub const BACKBONE: &str = "backbone.";
pub const MSFA: &str = "msfa.";
pub const DETECTOR: &str = "det.";
pub const GRASP: &str = "grasp.";
pub const RELATION: &str = "rel.";

fn stem_names() -> [&'static str; 4] {
    ["backbone.stem", "backbone.block1", "backbone.block2", "backbone.block3"]
}

fn lateral_name(i: usize) -> String {
    format!("msfa.lateral{i}.w")
}

fn fuse_name(round: usize, i: usize) -> String {
    format!("msfa.fuse{round}.{i}.w")
}

/// Parameters the aggregation module adds on top of the plain backbone.
pub fn msfa_param_count(cfg: &ModelConfig) -> usize {
    let f = cfg.fusion_channels;
    cfg.channels.iter().sum::<usize>() * f + cfg.msfa_rounds * 3 * 9 * f * f
}

/// Channels of the map the heads read at scale `i`.
fn head_channels(cfg: &ModelConfig, i: usize) -> usize {
    if cfg.msfa {
        cfg.fusion_channels
    } else {
        cfg.channels[i]
    }
}

/// Index and stride of the map the relation head crops from.
pub fn relation_scale(cfg: &ModelConfig) -> usize {
    if cfg.msfa {
        0
    } else {
        1
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Bound of the uniform init of the last layer of the dense heads; small so
/// the prior biases decide the untrained output.
pub const HEAD_INIT_BOUND: f64 = 0.01;

fn shrink<T: Scalar>(store: &mut ParamStore<T>, name: &str) {
    let mut v = store.get(name).expect("registered").value.clone();
    let fan_in: usize = v.shape()[1..].iter().product();
    let k = T::of(HEAD_INIT_BOUND / (6.0 / fan_in as f64).sqrt());
    v.data_mut().iter_mut().for_each(|x| *x = *x * k);
    store.set_value(name, v).unwrap();
}

/// Fresh parameters for `cfg`: He-uniform weights, zero biases, and quiet
/// dense heads.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let conv = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, bias: bool| {
        store
            .insert(&format!("{name}.w"), uniform(rng, &[cout, cin, k, k], cin * k * k), true)
            .unwrap();
        if bias {
            store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]), true).unwrap();
        }
    };
    let ins = [3, cfg.stem_channels, cfg.channels[0], cfg.channels[1]];
    let outs = [cfg.stem_channels, cfg.channels[0], cfg.channels[1], cfg.channels[2]];
    for (k, name) in stem_names().iter().enumerate() {
        conv(&mut store, &mut rng, name, ins[k], outs[k], 3, true);
    }
    if cfg.msfa {
        let f = cfg.fusion_channels;
        for i in 0..3 {
            conv(&mut store, &mut rng, &format!("msfa.lateral{i}"), cfg.channels[i], f, 1, false);
        }
        for r in 0..cfg.msfa_rounds {
            for i in 0..3 {
                conv(&mut store, &mut rng, &format!("msfa.fuse{r}.{i}"), f, f, 3, false);
            }
        }
    }
    let mid = head_channels(cfg, 1);
    let c = cfg.n_classes;
    conv(&mut store, &mut rng, "det", mid, c + 5, 3, true);
    shrink(&mut store, "det.w");
    let mut b = vec![0.0; c + 5];
    b[0] = DETECTOR_BG_BIAS;
    store.set_value("det.b", Tensor::from_f64(&[c + 5], &b).unwrap()).unwrap();

    let k = cfg.grasp_channels();
    conv(&mut store, &mut rng, "grasp.hidden", mid, cfg.fusion_channels, 3, true);
    conv(&mut store, &mut rng, "grasp.out", cfg.fusion_channels, 3 * k, 1, true);
    shrink(&mut store, "grasp.out.w");
    let mut b = vec![0.0; 3 * k];
    for a in 0..3 {
        b[a * k + 4] = GRASP_CONF_BIAS;
    }
    store.set_value("grasp.out.b", Tensor::from_f64(&[3 * k], &b).unwrap()).unwrap();

    let fr = head_channels(cfg, relation_scale(cfg));
    conv(&mut store, &mut rng, "rel.conv", 4 * fr, cfg.relation_channels, 3, true);
    let flat = cfg.relation_channels * cfg.roi_size * cfg.roi_size;
    let h = cfg.relation_hidden;
    store.insert("rel.fc1.w", uniform(&mut rng, &[h, flat], flat), true).unwrap();
    store.insert("rel.fc1.b", Tensor::zeros(&[h]), true).unwrap();
    store.insert("rel.fc2.w", uniform(&mut rng, &[3, h], h), true).unwrap();
    store.insert("rel.fc2.b", Tensor::zeros(&[3]), true).unwrap();
    store
}

/// `(1, 3, H, W)` tensor with channels scaled to [0, 1].
pub fn image_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width as usize, img.height as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (p, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = T::of(px[c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![1, 3, h, w], data).unwrap()
}

/// One forward pass: a tape plus the parameter variables recorded on it so far.
pub struct Graph<'a, T: Scalar> {
    pub tape: Tape<T>,
    pub cfg: &'a ModelConfig,
    store: &'a ParamStore<T>,
    vars: HashMap<String, Var>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore<T>, tape: Tape<T>) -> Self {
        Self {
            tape,
            cfg,
            store,
            vars: HashMap::new(),
        }
    }

    /// Uses `v` for parameter `name` instead of recording it from the store.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    /// Each parameter is recorded once per tape so its gradient is reported once.
    pub fn p(&mut self, name: &str) -> R<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.tape.param(self.store, name)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, x: Var, name: &str, bias: bool, pad: usize) -> R<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = if bias { Some(self.p(&format!("{name}.b"))?) } else { None };
        self.tape.conv2d(x, w, b, 1, pad)
    }

    fn hw(&self, v: Var) -> (usize, usize) {
        let s = self.tape.shape(v);
        (s[2], s[3])
    }

    /// Maps at strides `scale_strides`, fine to coarse.
    pub fn backbone(&mut self, image: Var) -> R<[Var; 3]> {
        let s = self.tape.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != self.cfg.input_hw {
            return Err(TensorError::Shape {
                op: "backbone",
                message: format!("expected (n, 3, {}, {}), got {s:?}", self.cfg.input_hw.0, self.cfg.input_hw.1),
            });
        }
        let names = stem_names();
        let x = self.conv(image, names[0], true, 1)?;
        let mut x = self.tape.relu(x);
        let mut maps = Vec::with_capacity(3);
        for i in 0..3 {
            let y = self.conv(x, names[i + 1], true, 1)?;
            let y = self.tape.relu(y);
            x = self.tape.adaptive_maxpool2d(y, self.cfg.map_hw(i))?;
            maps.push(x);
        }
        Ok([maps[0], maps[1], maps[2]])
    }

    /// Lateral projection, then per round a top-down pass, a bottom-up pass
    /// and a 3x3 fusion conv at every scale. Identity when disabled.
    pub fn msfa(&mut self, maps: [Var; 3]) -> R<[Var; 3]> {
        if !self.cfg.msfa {
            return Ok(maps);
        }
        let mut p = [maps[0]; 3];
        for i in 0..3 {
            let w = self.p(&lateral_name(i))?;
            p[i] = self.tape.conv2d(maps[i], w, None, 1, 0)?;
        }
        for r in 0..self.cfg.msfa_rounds {
            for i in (0..2).rev() {
                let up = self.tape.upsample_nearest(p[i + 1], self.hw(p[i]))?;
                p[i] = self.tape.add(p[i], up)?;
            }
            for i in 1..3 {
                let down = self.tape.adaptive_maxpool2d(p[i - 1], self.hw(p[i]))?;
                p[i] = self.tape.add(p[i], down)?;
            }
            for i in 0..3 {
                let w = self.p(&fuse_name(r, i))?;
                let y = self.tape.conv2d(p[i], w, None, 1, 1)?;
                p[i] = self.tape.relu(y);
            }
        }
        Ok(p)
    }

    /// Dense detector output `(n, 1 + C + 4, H, W)` at the middle scale:
    /// background logit, class logits, then box offsets.
    pub fn detector(&mut self, mid: Var) -> R<Var> {
        self.conv(mid, "det", true, 1)
    }

    /// Grasp output `(n, A * (4 + 1 + bins + C), H, W)` at the middle scale,
    /// through one hidden 3x3 layer.
    pub fn grasp_head(&mut self, mid: Var) -> R<Var> {
        let h = self.conv(mid, "grasp.hidden", true, 1)?;
        let h = self.tape.relu(h);
        self.conv(h, "grasp.out", true, 0)
    }

    /// Relation probabilities `(pairs, 3)` over [On, Under, NoRel] for ordered
    /// pairs `(a, b)`; boxes are in image pixels. Short-circuiting is the
    /// caller's business: an empty intersection here gives a zero block.
    pub fn relation(&mut self, map: Var, stride: f64, pairs: &[(ObjectBox, ObjectBox)]) -> R<Var> {
        let p = self.cfg.roi_size;
        let s = self.tape.shape(map).to_vec();
        if pairs.is_empty() || s.len() != 4 || s[0] != 1 {
            return Err(TensorError::Shape {
                op: "relation",
                message: format!("{} pairs over map {s:?}", pairs.len()),
            });
        }
        let roi = |b: &ObjectBox| [b.x1 / stride, b.y1 / stride, b.x2 / stride, b.y2 / stride];
        let mut blocks = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            let fa = self.tape.roi_pool(map, roi(a), (p, p))?;
            let fb = self.tape.roi_pool(map, roi(b), (p, p))?;
            let fu = self.tape.roi_pool(map, roi(&box_union(a, b)), (p, p))?;
            let fi = match box_intersection(a, b) {
                Some(i) => match self.tape.roi_pool(map, roi(&i), (p, p)) {
                    Ok(v) => v,
                    Err(TensorError::EmptyRoi(_)) => self.tape.constant(Tensor::zeros(&[1, s[1], p, p])),
                    Err(e) => return Err(e),
                },
                None => self.tape.constant(Tensor::zeros(&[1, s[1], p, p])),
            };
            blocks.push(self.tape.concat(&[fa, fb, fu, fi], 1)?);
        }
        let x = self.tape.concat(&blocks, 0)?;
        let y = self.conv(x, "rel.conv", true, 1)?;
        let y = self.tape.relu(y);
        let y = self.tape.reshape(y, &[pairs.len(), self.cfg.relation_channels * p * p])?;
        let (w1, b1) = (self.p("rel.fc1.w")?, self.p("rel.fc1.b")?);
        let y = self.tape.linear(y, w1, Some(b1))?;
        let y = self.tape.relu(y);
        let (w2, b2) = (self.p("rel.fc2.w")?, self.p("rel.fc2.b")?);
        let y = self.tape.linear(y, w2, Some(b2))?;
        self.tape.softmax(y)
    }
}
