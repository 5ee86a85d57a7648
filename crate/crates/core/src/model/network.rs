//! Toy encoders, cross-attention and the two prediction heads.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::EncoderConfig;

/// A 1x1 projection or fully-connected layer: `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row_bias(y, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
}

/// Filtering-mask head: two 3x3 conv + relu layers, then a per-cell
/// fully-connected layer and a sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct MaskHead {
    pub conv1: Conv,
    pub conv2: Conv,
    pub fc: Conv,
}

/// `[c, h, w] -> [h*w, c]`
pub fn flatten_cells(g: &mut Graph, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("flatten_cells", format!("expected [c, h, w], got {s:?}")));
    }
    let flat = g.reshape(f, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Row-softmax of the projected foreground cells against the projected
/// background cells: `A = softmax(phi_f(F^f) phi_b(F^b)^T)`.
pub fn cross_attention(g: &mut Graph, ff: Var, fb: Var, proj_f: &Linear, proj_b: &Linear) -> Result<Var> {
    if g.shape(ff) != g.shape(fb) {
        return Err(Error::shape(
            "cross_attention",
            format!("{:?} vs {:?}", g.shape(ff), g.shape(fb)),
        ));
    }
    let xf = flatten_cells(g, ff)?;
    let xb = flatten_cells(g, fb)?;
    let pf = proj_f.apply(g, xf)?;
    let pb = proj_b.apply(g, xb)?;
    let pbt = g.transpose(pb)?;
    let logits = g.matmul(pf, pbt)?;
    g.softmax_rows(logits)
}

/// Shared affine map from each attention row to a target coordinate.
pub fn predict_targets(g: &mut Graph, a: Var, head: &Linear) -> Result<Var> {
    head.apply(g, a)
}

/// Background features re-sampled at the predicted targets, laid out on the
/// foreground grid.
pub fn align_background(g: &mut Graph, fb: Var, targets: Var) -> Result<Var> {
    let s = g.shape(fb).to_vec();
    if s.len() != 3 || g.shape(targets) != [s[1] * s[2], 2] {
        return Err(Error::shape(
            "align_background",
            format!("features {s:?} with targets {:?}", g.shape(targets)),
        ));
    }
    let gathered = g.bilinear_gather(fb, targets)?;
    g.reshape(gathered, &s)
}

/// Per-cell filtering mask in `(0, 1)`, flattened to `[n]`.
pub fn predict_filter_mask(g: &mut Graph, ff: Var, aligned: Var, head: &MaskHead) -> Result<Var> {
    let s = g.shape(ff).to_vec();
    if g.shape(aligned) != s.as_slice() {
        return Err(Error::shape(
            "predict_filter_mask",
            format!("{s:?} vs {:?}", g.shape(aligned)),
        ));
    }
    let x = g.concat(&[ff, aligned], 0)?;
    let x = g.conv2d(x, head.conv1.weight, head.conv1.bias, 1, 1)?;
    let x = g.relu(x)?;
    let x = g.conv2d(x, head.conv2.weight, head.conv2.bias, 1, 1)?;
    let x = g.relu(x)?;
    let x = g.conv2d(x, head.fc.weight, head.fc.bias, 1, 0)?;
    let x = g.sigmoid(x)?;
    g.reshape(x, &[s[1] * s[2]])
}

/// `[4, s, s]` foreground input (RGB then mask).
pub fn foreground_input(fg: &Image, mask: &Image, size: usize) -> Result<Tensor> {
    for (what, img, c) in [("foreground", fg, 3), ("mask", mask, 1)] {
        if img.dims() != (size, size) || img.channels() != c {
            return Err(Error::Invalid(format!(
                "{what} is {}x{}x{}, expected {size}x{size}x{c}",
                img.width(),
                img.height(),
                img.channels()
            )));
        }
    }
    let mut data = fg.to_chw().into_data();
    data.extend(mask.to_chw().into_data());
    Tensor::new(vec![4, size, size], data)
}

/// `[3, s, s]` background input.
pub fn background_input(bg: &Image, size: usize) -> Result<Tensor> {
    if bg.dims() != (size, size) || bg.channels() != 3 {
        return Err(Error::Invalid(format!(
            "background is {}x{}x{}, expected {size}x{size}x3",
            bg.width(),
            bg.height(),
            bg.channels()
        )));
    }
    Ok(bg.to_chw())
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub ff: Var,
    pub fb: Var,
    pub attention: Var,
    pub targets: Var,
    pub aligned: Var,
    pub mask: Var,
}

/// Trainable weights, stored by name in a fixed order.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Model {
    /// Fresh weights, uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut specs: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let conv = |specs: &mut Vec<(String, Vec<usize>, usize)>, name: &str, o: usize, i: usize, k: usize| {
            specs.push((format!("{name}.weight"), vec![o, i, k, k], i * k * k));
            specs.push((format!("{name}.bias"), vec![o], i * k * k));
        };
        let mut widths = cfg.trunk_channels.clone();
        widths.push(cfg.channels);
        conv(&mut specs, "fg.conv0", widths[0], 4, 3);
        conv(&mut specs, "bg.conv0", widths[0], 3, 3);
        for k in 1..widths.len() {
            if cfg.shared_trunk {
                conv(&mut specs, &format!("trunk.conv{k}"), widths[k], widths[k - 1], 3);
            } else {
                conv(&mut specs, &format!("fg.conv{k}"), widths[k], widths[k - 1], 3);
                conv(&mut specs, &format!("bg.conv{k}"), widths[k], widths[k - 1], 3);
            }
        }
        let (c, cp, n) = (cfg.channels, cfg.proj_channels, cfg.cells());
        for name in ["proj_f", "proj_b"] {
            specs.push((format!("{name}.weight"), vec![c, cp], c));
            specs.push((format!("{name}.bias"), vec![cp], c));
        }
        specs.push(("target.weight".into(), vec![n, 2], n));
        specs.push(("target.bias".into(), vec![2], n));
        conv(&mut specs, "mask.conv1", cfg.mask_channels, 2 * c, 3);
        conv(&mut specs, "mask.conv2", cfg.mask_channels, cfg.mask_channels, 3);
        conv(&mut specs, "mask.fc", 1, cfg.mask_channels, 1);

        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, fan_in) in specs {
            names.push(name);
            params.push(Tensor::uniform_init(&shape, fan_in, &mut rng));
        }
        Ok(Model::assemble(cfg.clone(), names, params))
    }

    fn assemble(cfg: EncoderConfig, names: Vec<String>, params: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Model { cfg, names, params, index }
    }

    /// Rebuild from named tensors; names and shapes must match a fresh model
    /// of the same configuration.
    pub fn from_named(cfg: &EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Model::new(cfg, 0)?;
        if named.len() != template.names.len() {
            return Err(Error::Invalid(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                template.names.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(template.named()) {
            if name != want || t.shape() != shape.shape() {
                return Err(Error::Invalid(format!(
                    "checkpoint tensor {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    shape.shape()
                )));
            }
            params.push(t.with_grad());
        }
        Ok(Model::assemble(cfg.clone(), template.names, params))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Put every weight on `g`, returning the nodes in parameter order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Copy gradients accumulated on `g` back onto the stored weights.
    pub fn collect_grads(&mut self, g: &Graph, vars: &[Var]) -> Result<()> {
        for (t, &v) in self.params.iter_mut().zip(vars) {
            let grad = g.grad(v).ok_or(Error::MissingGrad(v.index()))?;
            t.accumulate_grad(grad);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.params {
            t.zero_grad();
        }
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.index[name]]
    }

    fn conv(&self, vars: &[Var], name: &str) -> Conv {
        Conv {
            weight: self.var(vars, &format!("{name}.weight")),
            bias: self.var(vars, &format!("{name}.bias")),
        }
    }

    fn encoder(&self, g: &mut Graph, vars: &[Var], side: &str, input: Var) -> Result<Var> {
        let mut x = input;
        for k in 0..self.cfg.blocks() {
            let name = if k > 0 && self.cfg.shared_trunk {
                format!("trunk.conv{k}")
            } else {
                format!("{side}.conv{k}")
            };
            let c = self.conv(vars, &name);
            x = g.conv2d(x, c.weight, c.bias, 2, 1)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }

    /// Both feature maps, `[c, h, w]` each.
    pub fn encode(&self, g: &mut Graph, vars: &[Var], fg_input: Var, bg_input: Var) -> Result<(Var, Var)> {
        let s = self.cfg.input_size;
        if g.shape(fg_input) != [4, s, s] || g.shape(bg_input) != [3, s, s] {
            return Err(Error::shape(
                "encode",
                format!(
                    "inputs {:?} and {:?}, expected [4, {s}, {s}] and [3, {s}, {s}]",
                    g.shape(fg_input),
                    g.shape(bg_input)
                ),
            ));
        }
        let ff = self.encoder(g, vars, "fg", fg_input)?;
        let fb = self.encoder(g, vars, "bg", bg_input)?;
        Ok((ff, fb))
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], fg_input: Var, bg_input: Var) -> Result<Forward> {
        let (ff, fb) = self.encode(g, vars, fg_input, bg_input)?;
        let linear = |name: &str| Linear {
            weight: self.var(vars, &format!("{name}.weight")),
            bias: self.var(vars, &format!("{name}.bias")),
        };
        let attention = cross_attention(g, ff, fb, &linear("proj_f"), &linear("proj_b"))?;
        let targets = predict_targets(g, attention, &linear("target"))?;
        let aligned = align_background(g, fb, targets)?;
        let head = MaskHead {
            conv1: self.conv(vars, "mask.conv1"),
            conv2: self.conv(vars, "mask.conv2"),
            fc: self.conv(vars, "mask.fc"),
        };
        let mask = predict_filter_mask(g, ff, aligned, &head)?;
        Ok(Forward { ff, fb, attention, targets, aligned, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cell_centers, AttentionMap};
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn identity_linear(g: &mut Graph, c: usize) -> Linear {
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        Linear {
            weight: g.constant(Tensor::new(vec![c, c], w).unwrap()),
            bias: g.constant(Tensor::zeros(&[c])),
        }
    }

    #[test]
    fn large_and_toy_feature_shapes() {
        let large = EncoderConfig {
            input_size: 224,
            stride: 16,
            channels: 1024,
            proj_channels: 256,
            trunk_channels: vec![64, 128, 256],
            ..EncoderConfig::default()
        };
        large.validate().unwrap();
        assert_eq!(large.grid(), (14, 14));

        let cfg = EncoderConfig::default();
        let model = Model::new(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let fg = g.constant(Tensor::zeros(&[4, 64, 64]));
        let bg = g.constant(Tensor::zeros(&[3, 64, 64]));
        let (ff, fb) = model.encode(&mut g, &vars, fg, bg).unwrap();
        assert_eq!(g.shape(ff), &[32, 8, 8]);
        assert_eq!(g.shape(fb), &[32, 8, 8]);
        let out = model.forward(&mut g, &vars, fg, bg).unwrap();
        for v in [out.attention, out.targets, out.mask] {
            assert!(g.data(v).iter().all(|x| x.is_finite()));
        }
        assert_eq!(g.shape(out.attention), &[64, 64]);
        assert_eq!(g.shape(out.targets), &[64, 2]);

        let bad = g.constant(Tensor::zeros(&[3, 32, 32]));
        assert!(model.encode(&mut g, &vars, fg, bad).is_err());
    }

    #[test]
    fn unshared_trunk_has_separate_weights() {
        let shared = Model::new(&EncoderConfig::tiny(), 0).unwrap();
        let cfg = EncoderConfig { shared_trunk: false, ..EncoderConfig::tiny() };
        let split = Model::new(&cfg, 0).unwrap();
        assert!(shared.param("trunk.conv1.weight").is_some());
        assert!(split.param("trunk.conv1.weight").is_none());
        assert!(split.param("fg.conv2.weight").is_some());
        assert!(split.parameter_count() > shared.parameter_count());
    }

    #[test]
    fn self_attention_prefers_matching_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let f = g.constant(random(&[6, 3, 3], &mut rng));
        let p = identity_linear(&mut g, 6);
        let a = cross_attention(&mut g, f, f, &p, &p).unwrap();
        // oracle: compare dot products directly
        let v = g.data(f).to_vec();
        let feat = |i: usize| (0..6).map(|c| v[c * 9 + i]).collect::<Vec<_>>();
        let map = AttentionMap::from_tensor(g.value(a)).unwrap();
        for i in 0..9 {
            let fi = feat(i);
            let best = (0..9)
                .max_by(|&x, &y| {
                    let dx: f64 = fi.iter().zip(feat(x)).map(|(a, b)| a * b).sum();
                    let dy: f64 = fi.iter().zip(feat(y)).map(|(a, b)| a * b).sum();
                    dx.partial_cmp(&dy).unwrap()
                })
                .unwrap();
            let row = map.row(i);
            let arg = (0..9).max_by(|&x, &y| row[x].partial_cmp(&row[y]).unwrap()).unwrap();
            assert_eq!(arg, best);
            let norm: f64 = fi.iter().map(|x| x * x).sum();
            if (0..9).all(|j| j == i || fi.iter().zip(feat(j)).map(|(a, b)| a * b).sum::<f64>() < norm) {
                assert_eq!(arg, i);
            }
        }
    }

    #[test]
    fn constant_features_give_uniform_rows() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[4, 2, 2], 0.7));
        let p = identity_linear(&mut g, 4);
        let a = cross_attention(&mut g, f, f, &p, &p).unwrap();
        assert!(g.data(a).iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fb = g.constant(random(&[4, 2, 2], &mut rng));
        let a = cross_attention(&mut g, f, fb, &p, &p).unwrap();
        for row in g.data(a).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        let other = g.constant(Tensor::zeros(&[4, 3, 3]));
        assert!(cross_attention(&mut g, f, other, &p, &p).is_err());
    }

    #[test]
    fn target_head_examples() {
        let mut g = Graph::new();
        let n = 9;
        let a = g.constant(Tensor::full(&[n, n], 1.0 / n as f64));
        let zero = Linear {
            weight: g.constant(Tensor::zeros(&[n, 2])),
            bias: g.constant(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()),
        };
        let t = predict_targets(&mut g, a, &zero).unwrap();
        assert!(g.data(t).iter().all(|&v| v == 0.5));

        let centers = cell_centers((3, 3));
        let centre_head = Linear {
            weight: g.constant(Tensor::new(vec![n, 2], centers.iter().flatten().copied().collect()).unwrap()),
            bias: g.constant(Tensor::zeros(&[2])),
        };
        let mut peaked = vec![0.001 / 8.0; n * n];
        for i in 0..n {
            peaked[i * n + (i * 4) % n] = 0.999;
        }
        let a = g.constant(Tensor::new(vec![n, n], peaked).unwrap());
        let t = predict_targets(&mut g, a, &centre_head).unwrap();
        for i in 0..n {
            let c = centers[(i * 4) % n];
            let p = &g.data(t)[2 * i..2 * i + 2];
            assert!((p[0] - c[0]).abs() < 1e-3 && (p[1] - c[1]).abs() < 1e-3);
        }
    }

    #[test]
    fn alignment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let fb_t = random(&[3, 4, 4], &mut rng);
        let fb = g.constant(fb_t.clone());
        let grid: Vec<f64> = cell_centers((4, 4)).into_iter().flatten().collect();
        let t = g.constant(Tensor::new(vec![16, 2], grid).unwrap());
        let out = align_background(&mut g, fb, t).unwrap();
        for (x, y) in g.data(out).iter().zip(fb_t.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let one = g.constant(Tensor::new(vec![16, 2], [0.625, 0.375].repeat(16)).unwrap());
        let out = align_background(&mut g, fb, one).unwrap();
        for c in 0..3 {
            let expected = fb_t.data()[c * 16 + 4 + 2];
            assert!(g.data(out)[c * 16..(c + 1) * 16].iter().all(|&v| (v - expected).abs() < 1e-12));
        }

        // fractional targets against a direct loop
        let coords: Vec<f64> = (0..32).map(|_| rng.gen_range(-0.2..1.2)).collect();
        let t = g.constant(Tensor::new(vec![16, 2], coords.clone()).unwrap());
        let out = align_background(&mut g, fb, t).unwrap();
        let at = |c: usize, x: i64, y: i64| {
            if (0..4).contains(&x) && (0..4).contains(&y) {
                fb_t.data()[c * 16 + y as usize * 4 + x as usize]
            } else {
                0.0
            }
        };
        for i in 0..16 {
            let (gx, gy) = (coords[2 * i] * 4.0 - 0.5, coords[2 * i + 1] * 4.0 - 0.5);
            let (x0, y0) = (gx.floor(), gy.floor());
            let (fx, fy) = (gx - x0, gy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for c in 0..3 {
                let v = at(c, x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + at(c, x0 + 1, y0) * fx * (1.0 - fy)
                    + at(c, x0, y0 + 1) * (1.0 - fx) * fy
                    + at(c, x0 + 1, y0 + 1) * fx * fy;
                assert!((g.data(out)[c * 16 + i] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_head_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let ff = g.constant(random(&[2, 3, 3], &mut rng));
        let al = g.constant(random(&[2, 3, 3], &mut rng));
        let zero_conv = |g: &mut Graph, o, i, k| Conv {
            weight: g.constant(Tensor::zeros(&[o, i, k, k])),
            bias: g.constant(Tensor::zeros(&[o])),
        };
        let head = MaskHead {
            conv1: zero_conv(&mut g, 3, 4, 3),
            conv2: zero_conv(&mut g, 3, 3, 3),
            fc: zero_conv(&mut g, 1, 3, 1),
        };
        let m = predict_filter_mask(&mut g, ff, al, &head).unwrap();
        assert_eq!(g.data(m), &[0.5; 9]);

        let mut rnd_conv = |g: &mut Graph, o, i, k| Conv {
            weight: g.constant(random(&[o, i, k, k], &mut rng)),
            bias: g.constant(random(&[o], &mut rng)),
        };
        let head = MaskHead {
            conv1: rnd_conv(&mut g, 3, 4, 3),
            conv2: rnd_conv(&mut g, 3, 3, 3),
            fc: rnd_conv(&mut g, 1, 3, 1),
        };
        let m = predict_filter_mask(&mut g, ff, al, &head).unwrap();
        assert!(g.data(m).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn named_round_trip() {
        let cfg = EncoderConfig::tiny();
        let model = Model::new(&cfg, 4).unwrap();
        let named: Vec<(String, Tensor)> = model.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let back = Model::from_named(&cfg, named.clone()).unwrap();
        assert_eq!(back.params()[3].data(), model.params()[3].data());
        let mut wrong = named;
        wrong.swap(0, 1);
        assert!(Model::from_named(&cfg, wrong).is_err());
    }
}
