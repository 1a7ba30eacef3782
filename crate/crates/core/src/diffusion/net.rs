//! The conditional noise predictor `eps(x_t, t, c)`: a three-level U-shaped
//! convolutional network with a sinusoidal timestep table, a learned
//! condition embedding (one row per finding plus a `none` row, summed over
//! the active findings) and a dense projection of the joint embedding into a
//! spatial map at the bottleneck.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tape::{NodeId, ParamId, ParamStore, Shape, Tape};
use crate::error::{Error, Result};
use crate::findings::FindingVector;
use crate::image::Image;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub image_size: usize,
    /// Channels at full, half and quarter resolution.
    pub channels: [usize; 3],
    pub emb_dim: usize,
    /// Channels of the conditioning map concatenated at the bottleneck.
    pub cond_map_channels: usize,
    pub n_findings: usize,
    pub t_train: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { image_size: 64, channels: [8, 16, 32], emb_dim: 32, cond_map_channels: 2, n_findings: 5, t_train: 200 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(Error::invalid(format!("image_size {} must be a positive multiple of 4", self.image_size)));
        }
        if self.channels.contains(&0) || self.emb_dim < 2 || !self.emb_dim.is_multiple_of(2) || self.n_findings == 0 {
            return Err(Error::invalid("network widths must be positive and emb_dim even"));
        }
        Ok(())
    }
}

/// Parameter ids of one conv block: conv, embedding bias, SiLU, conv, SiLU.
#[derive(Debug, Clone, Copy)]
struct Block {
    w1: ParamId,
    b1: ParamId,
    ew: ParamId,
    eb: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    time_w: ParamId,
    time_b: ParamId,
    cond_table: ParamId,
    mix_w: ParamId,
    mix_b: ParamId,
    map_w: ParamId,
    map_b: ParamId,
    blocks: [Block; 5],
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: NetConfig,
    params: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(name, shape, data)
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.store.add(name, shape, vec![0.0; n])
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> (ParamId, ParamId) {
        let w = self.uniform(format!("{name}.w"), vec![cout, cin, 3, 3], cin * 9);
        let b = self.uniform(format!("{name}.b"), vec![cout], cin * 9);
        (w, b)
    }

    fn linear(&mut self, name: &str, nin: usize, nout: usize) -> (ParamId, ParamId) {
        let w = self.uniform(format!("{name}.w"), vec![nout, nin], nin);
        let b = self.zeros(format!("{name}.b"), vec![nout]);
        (w, b)
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> Block {
        let (w1, b1) = self.conv(&format!("{name}.conv1"), cin, cout);
        let (ew, eb) = self.linear(&format!("{name}.emb"), emb, cout);
        let (w2, b2) = self.conv(&format!("{name}.conv2"), cout, cout);
        Block { w1, b1, ew, eb, w2, b2 }
    }
}

fn build_layout(config: &NetConfig, rng: Option<&mut Rng>) -> (ParamStore, Layout) {
    let mut dummy = crate::rng::substream(0, "layout");
    let rng = rng.unwrap_or(&mut dummy);
    let mut init = Init { store: ParamStore::default(), rng };
    let [c0, c1, c2] = config.channels;
    let e = config.emb_dim;
    let q = config.image_size / 4;
    let (time_w, time_b) = init.linear("time", e, e);
    let cond_table = init.uniform("cond_table".into(), vec![config.n_findings + 1, e], 1);
    let (mix_w, mix_b) = init.linear("mix", e, e);
    let (map_w, map_b) = init.linear("cond_map", e, config.cond_map_channels * q * q);
    let blocks = [
        init.block("down0", 3, c0, e),
        init.block("down1", c0, c1, e),
        init.block("mid", c1 + config.cond_map_channels, c2, e),
        init.block("up1", c2 + c1, c1, e),
        init.block("up0", c1 + c0, c0, e),
    ];
    let (out_w, out_b) = init.conv("out", c0, 1);
    let layout = Layout { time_w, time_b, cond_table, mix_w, mix_b, map_w, map_b, blocks, out_w, out_b };
    (init.store, layout)
}

/// Sinusoidal features of `t`, half sines and half cosines.
pub fn timestep_features(t: usize, dim: usize, t_train: usize) -> Vec<f64> {
    let half = dim / 2;
    // scale so the fastest frequency resolves unit steps of a 1000-step clock
    let pos = t as f64 * 1000.0 / t_train.max(1) as f64;
    let mut out = Vec::with_capacity(dim);
    let freq = |k: usize| (-(10000f64.ln()) * k as f64 / half as f64).exp();
    out.extend((0..half).map(|k| (pos * freq(k)).sin()));
    out.extend((0..half).map(|k| (pos * freq(k)).cos()));
    out
}

impl Denoiser {
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build_layout(&config, Some(rng));
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a network around stored parameters, checking names and shapes.
    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (expected, layout) = build_layout(&config, None);
        if expected.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.params.iter().zip(&params.params) {
            if e.name != p.name || e.shape != p.shape || p.data.len() != e.data.len() {
                return Err(Error::invalid(format!("parameter {:?} {:?} does not match layout", p.name, p.shape)));
            }
        }
        if !params.all_finite() {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_input(&self, x: &Image, t: usize, c: &FindingVector) -> Result<()> {
        let n = self.config.image_size;
        if x.width() != n || x.height() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n}x{n}"),
                got: format!("{}x{}", x.width(), x.height()),
            });
        }
        if c.len() != self.config.n_findings {
            return Err(Error::DimensionMismatch {
                expected: format!("{} findings", self.config.n_findings),
                got: format!("{} findings", c.len()),
            });
        }
        if t > self.config.t_train {
            return Err(Error::invalid(format!("timestep {t} beyond t_train {}", self.config.t_train)));
        }
        Ok(())
    }

    fn block(tape: &mut Tape<'_>, b: &Block, x: NodeId, emb: NodeId) -> NodeId {
        let h = tape.conv3x3(x, b.w1, b.b1);
        let eb = tape.linear(emb, b.ew, b.eb);
        let h = tape.channel_bias(h, eb);
        let h = tape.silu(h);
        let h = tape.conv3x3(h, b.w2, b.b2);
        tape.silu(h)
    }

    /// Records the forward pass and returns the output node `[1, n, n]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: &Image, t: usize, c: &FindingVector) -> NodeId {
        let cfg = &self.config;
        let l = &self.layout;
        let n = cfg.image_size;

        let tf = tape.leaf(Shape::vector(cfg.emb_dim), timestep_features(t, cfg.emb_dim, cfg.t_train));
        let te = tape.linear(tf, l.time_w, l.time_b);
        let rows: Vec<usize> = if c.any() { c.active().collect() } else { vec![cfg.n_findings] };
        let ce = tape.embed_sum(l.cond_table, rows);
        let e = tape.add(te, ce);
        let e = tape.silu(e);
        let e = tape.linear(e, l.mix_w, l.mix_b);
        let emb = tape.silu(e);

        let mut input = Vec::with_capacity(3 * n * n);
        input.extend_from_slice(x.data());
        let coord = |i: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
        input.extend((0..n * n).map(|i| coord(i % n)));
        input.extend((0..n * n).map(|i| coord(i / n)));
        let xin = tape.leaf(Shape::new(3, n, n), input);

        let h0 = Self::block(tape, &l.blocks[0], xin, emb);
        let p1 = tape.avg_pool2(h0);
        let h1 = Self::block(tape, &l.blocks[1], p1, emb);
        let p2 = tape.avg_pool2(h1);
        let m = tape.linear(emb, l.map_w, l.map_b);
        let m = tape.reshape(m, Shape::new(cfg.cond_map_channels, n / 4, n / 4));
        let mid_in = tape.concat(p2, m);
        let h2 = Self::block(tape, &l.blocks[2], mid_in, emb);
        let u1 = tape.upsample2(h2);
        let u1 = tape.concat(u1, h1);
        let g1 = Self::block(tape, &l.blocks[3], u1, emb);
        let u0 = tape.upsample2(g1);
        let u0 = tape.concat(u0, h0);
        let g0 = Self::block(tape, &l.blocks[4], u0, emb);
        tape.conv3x3(g0, l.out_w, l.out_b)
    }

    pub fn predict(&self, x: &Image, t: usize, c: &FindingVector) -> Result<Image> {
        self.check_input(x, t, c)?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, x, t, c);
        Image::from_vec(x.width(), x.height(), tape.value(out).to_vec())
    }

    /// Sum of squared errors against `target` and its parameter gradient,
    /// accumulated into `grads`.
    pub fn sse_and_grad(
        &self,
        x: &Image,
        t: usize,
        c: &FindingVector,
        target: &Image,
        grads: &mut [Vec<f64>],
    ) -> Result<f64> {
        self.check_input(x, t, c)?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, x, t, c);
        let pred = tape.value(out);
        let mut sse = 0.0;
        let seed = pred
            .iter()
            .zip(target.data())
            .map(|(p, e)| {
                let d = p - e;
                sse += d * d;
                2.0 * d
            })
            .collect();
        tape.backward(out, seed, grads);
        Ok(sse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn parameter_layout_round_trips() {
        let cfg = NetConfig { image_size: 16, channels: [2, 4, 4], emb_dim: 8, ..Default::default() };
        let net = Denoiser::new(cfg.clone(), &mut substream(1, "init")).unwrap();
        let again = Denoiser::from_params(cfg.clone(), net.params().clone()).unwrap();
        assert_eq!(again.params(), net.params());
        let mut broken = net.params().clone();
        broken.params[0].shape = vec![1];
        assert!(Denoiser::from_params(cfg, broken).is_err());
    }

    #[test]
    fn condition_table_has_none_row() {
        let cfg = NetConfig { image_size: 8, channels: [2, 2, 2], emb_dim: 4, n_findings: 5, ..Default::default() };
        let net = Denoiser::new(cfg, &mut substream(1, "init")).unwrap();
        let table = net.params().params.iter().find(|p| p.name == "cond_table").unwrap();
        assert_eq!(table.shape, vec![6, 4]);
    }

    #[test]
    fn prediction_depends_on_condition() {
        let cfg = NetConfig { image_size: 8, channels: [2, 2, 2], emb_dim: 4, n_findings: 2, ..Default::default() };
        let net = Denoiser::new(cfg, &mut substream(1, "init")).unwrap();
        let x = Image::filled(8, 8, 0.3);
        let a = net.predict(&x, 5, &FindingVector::from_bools(vec![false, false])).unwrap();
        let b = net.predict(&x, 5, &FindingVector::from_bools(vec![true, false])).unwrap();
        assert!(a.squared_distance(&b) > 0.0);
        assert!(net.predict(&Image::new(4, 4), 5, &FindingVector::empty(2)).is_err());
        assert!(net.predict(&x, 201, &FindingVector::empty(2)).is_err());
    }
}
