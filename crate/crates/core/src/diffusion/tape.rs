//! A minimal reverse-mode differentiation tape over `(channels, height,
//! width)` tensors, with just the operations the denoiser needs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn vector(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Named parameter tensor. Conv weights are `[out, in, 3, 3]`, linear weights
/// `[out, in]`, embedding tables `[rows, dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

pub type ParamId = usize;

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param { name: name.into(), shape, data });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3x3 { x: NodeId, w: ParamId, b: ParamId },
    Linear { x: NodeId, w: ParamId, b: ParamId },
    EmbedSum { table: ParamId, rows: Vec<usize> },
    ChannelBias { x: NodeId, bias: NodeId },
    Add(NodeId, NodeId),
    Silu(NodeId),
    AvgPool2(NodeId),
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
}

/// Records a forward computation against a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(64) }
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node { shape, value, op });
        self.nodes.len() - 1
    }

    pub fn shape(&self, n: NodeId) -> Shape {
        self.nodes[n].shape
    }

    pub fn value(&self, n: NodeId) -> &[f64] {
        &self.nodes[n].value
    }

    pub fn leaf(&mut self, shape: Shape, value: Vec<f64>) -> NodeId {
        self.push(shape, value, Op::Leaf)
    }

    /// Same-padded 3x3 convolution.
    pub fn conv3x3(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let xs = self.nodes[x].shape;
        let wp = &self.params.params[w];
        let cout = wp.shape[0];
        debug_assert_eq!(wp.shape, vec![cout, xs.c, 3, 3]);
        let (h, wd) = (xs.h, xs.w);
        let plane = h * wd;
        let bias = &self.params.params[b].data;
        let cols = im2col(&self.nodes[x].value, xs);
        let mut out = vec![0.0; cout * plane];
        for (co, o) in out.chunks_exact_mut(plane).enumerate() {
            o.fill(bias[co]);
        }
        gemm(cout, xs.c * 9, plane, &wp.data, Layout::Normal, &cols, Layout::Normal, &mut out);
        self.push(Shape::new(cout, h, wd), out, Op::Conv3x3 { x, w, b })
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let input = &self.nodes[x].value;
        let wp = &self.params.params[w];
        let (m, n) = (wp.shape[0], wp.shape[1]);
        debug_assert_eq!(n, input.len());
        let bias = &self.params.params[b].data;
        let out = (0..m)
            .map(|i| bias[i] + wp.data[i * n..(i + 1) * n].iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        self.push(Shape::vector(m), out, Op::Linear { x, w, b })
    }

    /// Sum of the listed rows of an embedding table.
    pub fn embed_sum(&mut self, table: ParamId, rows: Vec<usize>) -> NodeId {
        let t = &self.params.params[table];
        let dim = t.shape[1];
        let mut out = vec![0.0; dim];
        for &r in &rows {
            for (o, v) in out.iter_mut().zip(&t.data[r * dim..(r + 1) * dim]) {
                *o += v;
            }
        }
        self.push(Shape::vector(dim), out, Op::EmbedSum { table, rows })
    }

    /// Adds `bias[c]` to every pixel of channel `c`.
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        debug_assert_eq!(self.nodes[bias].value.len(), s.c);
        let plane = s.plane();
        let bv = &self.nodes[bias].value;
        let out = self.nodes[x].value.iter().enumerate().map(|(i, v)| v + bv[i / plane]).collect();
        self.push(s, out, Op::ChannelBias { x, bias })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].shape, self.nodes[b].shape);
        let out = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x + y).collect();
        self.push(self.nodes[a].shape, out, Op::Add(a, b))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.iter().map(|&v| v * sigmoid(v)).collect();
        self.push(self.nodes[x].shape, out, Op::Silu(x))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        let (h2, w2) = (s.h / 2, s.w / 2);
        let v = &self.nodes[x].value;
        let mut out = vec![0.0; s.c * h2 * w2];
        for c in 0..s.c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let at = |dy: usize, dx: usize| v[c * s.plane() + (2 * y + dy) * s.w + 2 * xx + dx];
                    out[(c * h2 + y) * w2 + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        self.push(Shape::new(s.c, h2, w2), out, Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        let (h2, w2) = (s.h * 2, s.w * 2);
        let v = &self.nodes[x].value;
        let mut out = vec![0.0; s.c * h2 * w2];
        for c in 0..s.c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(c * h2 + y) * w2 + xx] = v[c * s.plane() + (y / 2) * s.w + xx / 2];
                }
            }
        }
        self.push(Shape::new(s.c, h2, w2), out, Op::Upsample2(x))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
        debug_assert_eq!((sa.h, sa.w), (sb.h, sb.w));
        let mut out = Vec::with_capacity(sa.len() + sb.len());
        out.extend_from_slice(&self.nodes[a].value);
        out.extend_from_slice(&self.nodes[b].value);
        self.push(Shape::new(sa.c + sb.c, sa.h, sa.w), out, Op::Concat(a, b))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Shape) -> NodeId {
        debug_assert_eq!(self.nodes[x].shape.len(), shape.len());
        let v = self.nodes[x].value.clone();
        self.push(shape, v, Op::Reshape(x))
    }

    /// Back-propagates `seed` (the gradient of the loss with respect to
    /// `output`) and accumulates parameter gradients into `grads`.
    pub fn backward(&self, output: NodeId, seed: Vec<f64>, grads: &mut [Vec<f64>]) {
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[output] = Some(seed);

        fn acc(g: &mut [Option<Vec<f64>>], n: NodeId, len: usize) -> &mut Vec<f64> {
            g[n].get_or_insert_with(|| vec![0.0; len])
        }

        for id in (0..=output).rev() {
            let Some(gout) = g[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Conv3x3 { x, w, b } => {
                    let xs = self.nodes[*x].shape;
                    let plane = xs.plane();
                    let k = xs.c * 9;
                    let wp = &self.params.params[*w];
                    let cout = node.shape.c;
                    for (co, go) in gout.chunks_exact(plane).enumerate() {
                        grads[*b][co] += go.iter().sum::<f64>();
                    }
                    let cols = im2col(&self.nodes[*x].value, xs);
                    // dW += dOut . cols^T
                    gemm(
                        cout,
                        plane,
                        k,
                        &gout,
                        Layout::Normal,
                        &cols,
                        Layout::Transposed { rows: plane },
                        &mut grads[*w],
                    );
                    // dcols = W^T . dOut
                    let mut dcols = vec![0.0; k * plane];
                    gemm(k, cout, plane, &wp.data, Layout::Transposed { rows: k }, &gout, Layout::Normal, &mut dcols);
                    col2im_accumulate(acc(&mut g, *x, xs.len()), &dcols, xs);
                }
                Op::Linear { x, w, b } => {
                    let input = &self.nodes[*x].value;
                    let wp = &self.params.params[*w];
                    let (m, n) = (wp.shape[0], wp.shape[1]);
                    for (i, &go) in gout.iter().enumerate().take(m) {
                        grads[*b][i] += go;
                        for (gw, &inp) in grads[*w][i * n..(i + 1) * n].iter_mut().zip(input) {
                            *gw += go * inp;
                        }
                    }
                    let gx = acc(&mut g, *x, n);
                    for (i, &go) in gout.iter().enumerate().take(m) {
                        for (gxj, &wij) in gx.iter_mut().zip(&wp.data[i * n..(i + 1) * n]) {
                            *gxj += go * wij;
                        }
                    }
                }
                Op::EmbedSum { table, rows } => {
                    let dim = node.shape.len();
                    for &r in rows {
                        for (gt, go) in grads[*table][r * dim..(r + 1) * dim].iter_mut().zip(&gout) {
                            *gt += go;
                        }
                    }
                }
                Op::ChannelBias { x, bias } => {
                    let plane = node.shape.plane();
                    let c = node.shape.c;
                    {
                        let gb = acc(&mut g, *bias, c);
                        for ch in 0..c {
                            gb[ch] += gout[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                        }
                    }
                    add_into(acc(&mut g, *x, gout.len()), &gout);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut g, *a, gout.len()), &gout);
                    add_into(acc(&mut g, *b, gout.len()), &gout);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[*x].value;
                    let gx = acc(&mut g, *x, gout.len());
                    for i in 0..gout.len() {
                        let s = sigmoid(xv[i]);
                        gx[i] += gout[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                }
                Op::AvgPool2(x) => {
                    let xs = self.nodes[*x].shape;
                    let (h2, w2) = (node.shape.h, node.shape.w);
                    let gx = acc(&mut g, *x, xs.len());
                    for c in 0..xs.c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                let v = 0.25 * gout[(c * h2 + y) * w2 + xx];
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    gx[c * xs.plane() + (2 * y + dy) * xs.w + 2 * xx + dx] += v;
                                }
                            }
                        }
                    }
                }
                Op::Upsample2(x) => {
                    let xs = self.nodes[*x].shape;
                    let (h2, w2) = (node.shape.h, node.shape.w);
                    let gx = acc(&mut g, *x, xs.len());
                    for c in 0..xs.c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                gx[c * xs.plane() + (y / 2) * xs.w + xx / 2] += gout[(c * h2 + y) * w2 + xx];
                            }
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let la = self.nodes[*a].shape.len();
                    add_into(acc(&mut g, *a, la), &gout[..la]);
                    add_into(acc(&mut g, *b, gout.len() - la), &gout[la..]);
                }
                Op::Reshape(x) => add_into(acc(&mut g, *x, gout.len()), &gout),
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    /// The operand is stored transposed; `rows` is its logical row count.
    Transposed {
        rows: usize,
    },
}

/// `c += a . b` with `a` logically `m x k`, `b` logically `k x n`, `c` row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed { rows } => (1, rows as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed { rows } => (1, rows as isize),
    };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements bounded by the slice lengths checked in debug builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Column ranges `[lo, hi)` of output pixels whose tap `d - 1` stays inside.
#[inline]
fn valid_range(n: usize, d: usize) -> (usize, usize) {
    match d {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

/// Rows `ci * 9 + tap`, columns pixels; zero outside the image.
fn im2col(input: &[f64], s: Shape) -> Vec<f64> {
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    let mut cols = vec![0.0; s.c * 9 * plane];
    for ci in 0..s.c {
        let inp = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            let (y0, y1) = valid_range(h, ky);
            for kx in 0..3 {
                let (x0, x1) = valid_range(w, kx);
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    row[y * w + x0..y * w + x1].copy_from_slice(&inp[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1]);
                }
            }
        }
    }
    cols
}

fn col2im_accumulate(gin: &mut [f64], dcols: &[f64], s: Shape) {
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    for ci in 0..s.c {
        let gi = &mut gin[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            let (y0, y1) = valid_range(h, ky);
            for kx in 0..3 {
                let (x0, x1) = valid_range(w, kx);
                let row = &dcols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let dst = &mut gi[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    for (d, v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-definition convolution, independent of the slice-based kernels.
    fn conv_reference(inp: &[f64], k: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        let (sy, sx) = (y + ky - 1, x + kx - 1);
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            s += k[(ky * 3 + kx) as usize] * inp[(sy * w as isize + sx) as usize];
                        }
                    }
                }
                out[(y * w as isize + x) as usize] = s;
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let (h, w) = (5, 7);
        let mut ps = ParamStore::default();
        let kdata: Vec<f64> = (0..18).map(|i| (i as f64 - 9.0) * 0.3).collect();
        let wid = ps.add("w", vec![1, 2, 3, 3], kdata.clone());
        let bid = ps.add("b", vec![1], vec![0.25]);
        let inp: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let mut tape = Tape::new(&ps);
        let x = tape.leaf(Shape::new(2, h, w), inp.clone());
        let y = tape.conv3x3(x, wid, bid);
        let a = conv_reference(&inp[..h * w], &kdata[..9], h, w);
        let b = conv_reference(&inp[h * w..], &kdata[9..], h, w);
        for i in 0..h * w {
            assert!((tape.value(y)[i] - (a[i] + b[i] + 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_and_embedding() {
        let mut ps = ParamStore::default();
        let w = ps.add("w", vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let b = ps.add("b", vec![2], vec![0.5, -0.5]);
        let t = ps.add("t", vec![3, 2], vec![1.0, 2.0, 10.0, 20.0, 100.0, 200.0]);
        let mut tape = Tape::new(&ps);
        let x = tape.leaf(Shape::vector(3), vec![1.0, 1.0, 1.0]);
        let y = tape.linear(x, w, b);
        assert_eq!(tape.value(y), &[6.5, -0.5]);
        let e = tape.embed_sum(t, vec![0, 2]);
        assert_eq!(tape.value(e), &[101.0, 202.0]);
    }
}
