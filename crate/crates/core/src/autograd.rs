//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] records every forward op as a node holding the computed value,
//! the parent node ids, and a backward rule mapping the output gradient to
//! input gradients. Node ids grow in creation order, so walking ids in
//! reverse is a reverse topological traversal that visits each node exactly
//! once; gradients from shared subexpressions sum on arrival.
//!
//! The tape is rebuilt every training step and dropped afterwards. Parameter
//! tensors live outside the graph; callers register them as leaves, run
//! forward ops, call [`Graph::backward`], then read gradients back out with
//! [`Graph::grad_data`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{stable_sigmoid, Tensor};

/// Forward-pass mode; controls batch-norm statistics and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn =
    Box<dyn Fn(&[f64], &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Vec<f64>>> + Send>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// The tape. One per forward/backward cycle.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Register a tensor as a leaf; `requires_grad` marks it for gradient
    /// accumulation during [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, vec![], requires_grad, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var(id)
    }

    fn push_op(&mut self, value: Tensor, parents: Vec<usize>, backward: BackwardFn) -> Var {
        let requires = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push(value, parents, requires, Some(backward))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`, if any.
    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cut the tape: a new non-tracked leaf carrying the same value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    /// Backpropagate from a scalar node, accumulating gradients for every
    /// reachable node whose `requires_grad` is set.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let gout = grads[id].take().unwrap();
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let input_grads = backward(&gout, &inputs, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (slot, ig) in node.parents.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[*slot].requires_grad {
                    continue;
                }
                match &mut grads[*slot] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&ig) {
                            *a += v;
                        }
                    }
                    None => grads[*slot] = Some(ig),
                }
            }
            grads[id] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    // ── elementwise and reduction ops ──────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "add: shape {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push_op(
            value,
            vec![a.0, b.0],
            Box::new(|g, _inputs, _out, needs| {
                let mk = |want: bool| want.then(|| g.to_vec());
                vec![mk(needs[0]), mk(needs[1])]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "mul: shape {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push_op(
            value,
            vec![a.0, b.0],
            Box::new(|g, inputs, _out, needs| {
                let da = needs[0]
                    .then(|| g.iter().zip(inputs[1].data()).map(|(g, y)| g * y).collect());
                let db = needs[1]
                    .then(|| g.iter().zip(inputs[0].data()).map(|(g, x)| g * x).collect());
                vec![da, db]
            }),
        ))
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        self.push_op(
            Tensor::scalar(total),
            vec![x.0],
            Box::new(|g, inputs, _out, needs| {
                vec![needs[0].then(|| vec![g[0]; inputs[0].numel()])]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_vec(self.value(x).shape(), data).expect("same shape");
        self.push_op(
            value,
            vec![x.0],
            Box::new(|g, inputs, _out, needs| {
                vec![needs[0].then(|| {
                    g.iter()
                        .zip(inputs[0].data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect()
                })]
            }),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * stable_sigmoid(v))
            .collect();
        let value = Tensor::from_vec(self.value(x).shape(), data).expect("same shape");
        self.push_op(
            value,
            vec![x.0],
            Box::new(|g, inputs, _out, needs| {
                vec![needs[0].then(|| {
                    g.iter()
                        .zip(inputs[0].data())
                        .map(|(g, &x)| {
                            let s = stable_sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect()
                })]
            }),
        )
    }

    /// Fully connected layer: `x[N,Fin] · w[Fout,Fin]ᵀ + b[Fout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, wfin) = self.value(w).dims2()?;
        if wfin != fin {
            return Err(Error::Dimension(format!(
                "linear: input features {} vs weight features {}",
                fin, wfin
            )));
        }
        if self.value(b).shape() != [fout] {
            return Err(Error::Dimension(format!(
                "linear: bias shape {:?}, expected [{}]",
                self.value(b).shape(),
                fout
            )));
        }
        let mut out = vec![0.0; n * fout];
        matmul_abt(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            n,
            fin,
            fout,
        );
        for row in out.chunks_mut(fout) {
            for (o, bias) in row.iter_mut().zip(self.value(b).data()) {
                *o += bias;
            }
        }
        let value = Tensor::from_vec(&[n, fout], out)?;
        Ok(self.push_op(
            value,
            vec![x.0, w.0, b.0],
            Box::new(move |g, inputs, _out, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * fin];
                    matmul(g, inputs[1].data(), &mut dx, n, fout, fin);
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; fout * fin];
                    matmul_atb(g, inputs[0].data(), &mut dw, fout, n, fin);
                    dw
                });
                let db = needs[2].then(|| {
                    let mut db = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    db
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// 2D cross-correlation with zero padding. Internally uses im2col plus a
    /// blocked matmul; results match the direct nested-loop definition.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d: input has {} channels, weight expects {}",
                cin, wcin
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Usage(format!(
                "conv2d: kernel extents must be odd, got {}x{}",
                kh, kw
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::Dimension(format!(
                "conv2d: padded input {}x{} smaller than kernel {}x{}",
                h + 2 * padding,
                wd + 2 * padding,
                kh,
                kw
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias shape {:?}, expected [{}]",
                    self.value(b).shape(),
                    cout
                )));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            padding,
        };
        let (ho, wo) = geom.out_size();
        let ckk = cin * kh * kw;
        let hw = ho * wo;

        let mut out = vec![0.0; n * cout * hw];
        let mut col = vec![0.0; ckk * hw];
        {
            let xd = self.value(x).data();
            let wd_ = self.value(w).data();
            for img in 0..n {
                im2col(&xd[img * cin * h * wd..][..cin * h * wd], &geom, &mut col);
                matmul(
                    wd_,
                    &col,
                    &mut out[img * cout * hw..][..cout * hw],
                    cout,
                    ckk,
                    hw,
                );
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for img in 0..n {
                for o in 0..cout {
                    let seg = &mut out[(img * cout + o) * hw..][..hw];
                    for v in seg {
                        *v += bd[o];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        let has_bias = b.is_some();
        Ok(self.push_op(
            value,
            parents,
            Box::new(move |g, inputs, _out, needs| {
                conv2d_backward(g, inputs, &geom, has_bias, needs)
            }),
        ))
    }

    /// Batch normalization over [N,C,H,W] (per channel) or [N,F] (per feature).
    ///
    /// Train mode normalizes with batch statistics and, when `update_stats`,
    /// folds them into the running buffers (unbiased variance, torch-style).
    /// Eval mode normalizes with the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        run_mean: &mut Tensor,
        run_var: &mut Tensor,
        mode: Mode,
        update_stats: bool,
        eps: f64,
        bn_momentum: f64,
    ) -> Result<Var> {
        let (n, c, s) = match self.value(x).shape() {
            [n, c, h, w] => (*n, *c, h * w),
            [n, f] => (*n, *f, 1),
            other => {
                return Err(Error::Dimension(format!(
                    "batch_norm: expected [N,C,H,W] or [N,F], got {:?}",
                    other
                )))
            }
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Dimension(format!(
                    "batch_norm: {} shape {:?}, expected [{}]",
                    name,
                    self.value(v).shape(),
                    c
                )));
            }
        }
        if run_mean.shape() != [c] || run_var.shape() != [c] {
            return Err(Error::Dimension(
                "batch_norm: running stats must have shape [C]".into(),
            ));
        }
        let rows = n * s;
        if mode == Mode::Train && rows < 2 {
            return Err(Error::Usage(
                "batch_norm: train mode needs at least 2 values per channel".into(),
            ));
        }

        // Per-channel mean and inverse stddev used for normalization.
        let (mean, inv) = match mode {
            Mode::Train => {
                let xd = self.value(x).data();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for img in 0..n {
                        let seg = &xd[(img * c + ch) * s..][..s];
                        acc += seg.iter().sum::<f64>();
                    }
                    mean[ch] = acc / rows as f64;
                    let mut v = 0.0;
                    for img in 0..n {
                        let seg = &xd[(img * c + ch) * s..][..s];
                        v += seg.iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
                    }
                    var[ch] = v / rows as f64;
                }
                if update_stats {
                    let unbias = if rows > 1 {
                        rows as f64 / (rows - 1) as f64
                    } else {
                        1.0
                    };
                    for ch in 0..c {
                        run_mean.data_mut()[ch] =
                            (1.0 - bn_momentum) * run_mean.data()[ch] + bn_momentum * mean[ch];
                        run_var.data_mut()[ch] = (1.0 - bn_momentum) * run_var.data()[ch]
                            + bn_momentum * var[ch] * unbias;
                    }
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => {
                let mean = run_mean.data().to_vec();
                let inv: Vec<f64> = run_var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + eps).sqrt())
                    .collect();
                (mean, inv)
            }
        };

        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * s;
                let (m, iv, ga, be) = (mean[ch], inv[ch], gd[ch], bd[ch]);
                for k in 0..s {
                    out[base + k] = ga * (xd[base + k] - m) * iv + be;
                }
            }
        }
        let value = Tensor::from_vec(self.value(x).shape(), out)?;
        let train = mode == Mode::Train;
        Ok(self.push_op(
            value,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |g, inputs, _out, needs| {
                bn_backward(g, inputs, &mean, &inv, n, c, s, train, needs)
            }),
        ))
    }

    /// Spatial mean per channel: [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let s = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let seg = &xd[i * s..][..s];
            *o = seg.iter().sum::<f64>() / s as f64;
        }
        let value = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push_op(
            value,
            vec![x.0],
            Box::new(move |g, _inputs, _out, needs| {
                vec![needs[0].then(|| {
                    let mut dx = vec![0.0; n * c * s];
                    for (i, gv) in g.iter().enumerate() {
                        let share = gv / s as f64;
                        for d in &mut dx[i * s..][..s] {
                            *d = share;
                        }
                    }
                    dx
                })]
            }),
        ))
    }

    /// Scalar-valued op of one input with a caller-supplied gradient rule;
    /// used by the loss functions.
    pub(crate) fn push_unary_loss(
        &mut self,
        value: Tensor,
        input: Var,
        grad_fn: Box<dyn Fn(f64, &Tensor) -> Vec<f64> + Send>,
    ) -> Var {
        self.push_op(
            value,
            vec![input.0],
            Box::new(move |g, inputs, _out, needs| {
                vec![needs[0].then(|| grad_fn(g[0], inputs[0]))]
            }),
        )
    }

    /// Inverted dropout: zeroes each element with probability `rate` in train
    /// mode and scales survivors by 1/(1-rate); eval mode is the identity.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout: rate must be in [0,1), got {}",
                rate
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::from_vec(self.value(x).shape(), data)?;
        Ok(self.push_op(
            value,
            vec![x.0],
            Box::new(move |g, _inputs, _out, needs| {
                vec![needs[0].then(|| g.iter().zip(&mask).map(|(g, m)| g * m).collect())]
            }),
        ))
    }
}

// ── convolution internals ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn out_size(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.padding - self.kh) / self.stride + 1;
        let wo = (self.w + 2 * self.padding - self.kw) / self.stride + 1;
        (ho, wo)
    }
}

/// Unfold one image [Cin,H,W] into a [Cin·kh·kw, Ho·Wo] patch matrix.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (ho, wo) = g.out_size();
    let hw = ho * wo;
    for c in 0..g.cin {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = ((c * g.kh + dy) * g.kw + dx) * hw;
                for oy in 0..ho {
                    let iy = (oy * g.stride + dy) as isize - g.padding as isize;
                    let dst = &mut col[row + oy * wo..][..wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + dx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a [Cin·kh·kw, Ho·Wo] patch-gradient matrix back onto one image.
fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_size();
    let hw = ho * wo;
    for c in 0..g.cin {
        for dy in 0..g.kh {
            for dxk in 0..g.kw {
                let row = ((c * g.kh + dy) * g.kw + dxk) * hw;
                for oy in 0..ho {
                    let iy = (oy * g.stride + dy) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    let src = &col[row + oy * wo..][..wo];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + dxk) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward(
    g: &[f64],
    inputs: &[&Tensor],
    geom: &ConvGeom,
    has_bias: bool,
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (ho, wo) = geom.out_size();
    let hw = ho * wo;
    let ckk = geom.cin * geom.kh * geom.kw;
    let img_len = geom.cin * geom.h * geom.w;
    let xd = inputs[0].data();
    let wd = inputs[1].data();

    let need_x = needs[0];
    let need_w = needs[1];
    let mut dx = need_x.then(|| vec![0.0; geom.n * img_len]);
    let mut dw = need_w.then(|| vec![0.0; geom.cout * ckk]);
    let mut col = vec![0.0; ckk * hw];

    for img in 0..geom.n {
        let gseg = &g[img * geom.cout * hw..][..geom.cout * hw];
        if let Some(dw) = &mut dw {
            im2col(&xd[img * img_len..][..img_len], geom, &mut col);
            matmul_abt(gseg, &col, dw, geom.cout, hw, ckk);
        }
        if let Some(dx) = &mut dx {
            col.fill(0.0);
            matmul_atb(wd, gseg, &mut col, ckk, geom.cout, hw);
            col2im(&col, geom, &mut dx[img * img_len..][..img_len]);
        }
    }

    let mut grads = vec![dx, dw];
    if has_bias {
        let db = needs[2].then(|| {
            let mut db = vec![0.0; geom.cout];
            for img in 0..geom.n {
                for o in 0..geom.cout {
                    db[o] += g[(img * geom.cout + o) * hw..][..hw].iter().sum::<f64>();
                }
            }
            db
        });
        grads.push(db);
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn bn_backward(
    g: &[f64],
    inputs: &[&Tensor],
    mean: &[f64],
    inv: &[f64],
    n: usize,
    c: usize,
    s: usize,
    train: bool,
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let xd = inputs[0].data();
    let gd = inputs[1].data();
    let rows = (n * s) as f64;

    // Channel sums of g and g*xhat, shared by all three gradients.
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * s;
            for k in 0..s {
                let xhat = (xd[base + k] - mean[ch]) * inv[ch];
                sum_g[ch] += g[base + k];
                sum_gx[ch] += g[base + k] * xhat;
            }
        }
    }

    let dx = needs[0].then(|| {
        let mut dx = vec![0.0; xd.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * s;
                let scale = gd[ch] * inv[ch];
                for k in 0..s {
                    dx[base + k] = if train {
                        let xhat = (xd[base + k] - mean[ch]) * inv[ch];
                        scale * (g[base + k] - sum_g[ch] / rows - xhat * sum_gx[ch] / rows)
                    } else {
                        scale * g[base + k]
                    };
                }
            }
        }
        dx
    });
    let dgamma = needs[1].then(|| sum_gx.clone());
    let dbeta = needs[2].then(|| sum_g.clone());
    vec![dx, dgamma, dbeta]
}

// ── matmul helpers (f64 slices, row-major) ─────────────────────────────

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..][..n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn matmul_abt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        for j in 0..n {
            let brow = &b[j * k..][..k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[m,n] += a[k,m]ᵀ · b[k,n]
pub(crate) fn matmul_atb(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..][..n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..][..n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use approx::assert_abs_diff_eq;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_product_grad_is_other_factor() {
        // loss = sum(w * x), x fixed -> dloss/dw = x
        let mut g = Graph::new();
        let w = g.leaf(tensor(&[3], &[1.0, -2.0, 0.5]), true);
        let x = g.constant(tensor(&[3], &[4.0, 5.0, 6.0]));
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad_data(w).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(g.grad_data(x).is_none());
    }

    #[test]
    fn relu_grad_is_piecewise_slope() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[2], &[-1.0, 2.0]), true);
        let y = g.relu(x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad_data(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[2], &[1.0, 2.0]), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x*x) -> dloss/dx = 2x via two gradient paths into x.
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[2], &[3.0, -1.5]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad_data(x).unwrap(), &[6.0, -3.0]);
    }

    #[test]
    fn conv_1x1_scales_channels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(tensor(&[1, 1, 1, 1], &[2.0]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_full_window_sums_at_center() {
        let data: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut g = Graph::new();
        let x = g.constant(tensor(&[1, 1, 3, 3], &data));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        // center element sums all nine inputs
        assert_abs_diff_eq!(g.value(y).data()[4], 45.0, epsilon = 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 4, 3, 3]));
        assert!(matches!(
            g.conv2d(x, w, None, 1, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_output_geometry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 9, 7]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        // H' = (9 + 2 - 3)/2 + 1 = 5, W' = (7 + 2 - 3)/2 + 1 = 4
        assert_eq!(g.value(y).shape(), &[1, 4, 5, 4]);
    }

    #[test]
    fn gap_of_constant_channel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 4], 7.5));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 7.5).abs() < 1e-15));
    }

    #[test]
    fn gap_and_add_are_linear() {
        let mut rng = stream_rng(11, Stream::Aux);
        let xs: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (a, b) = (1.7, -0.3);
        let combo: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();

        let mut g = Graph::new();
        let vx = g.constant(tensor(&[2, 3, 4, 4], &xs));
        let vy = g.constant(tensor(&[2, 3, 4, 4], &ys));
        let vc = g.constant(tensor(&[2, 3, 4, 4], &combo));
        let px = g.global_avg_pool(vx).unwrap();
        let py = g.global_avg_pool(vy).unwrap();
        let pc = g.global_avg_pool(vc).unwrap();
        for i in 0..6 {
            let lhs = g.value(pc).data()[i];
            let rhs = a * g.value(px).data()[i] + b * g.value(py).data()[i];
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn bn_identity_on_standardized_input() {
        // per-channel mean 0, variance 1, gamma=1, beta=0, eps=0 -> identity
        let normalized = tensor(&[4, 2], &[1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        let mut g = Graph::new();
        let v = g.constant(normalized.clone());
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        let y = g
            .batch_norm(v, gamma, beta, &mut rm, &mut rv, Mode::Train, true, 0.0, 0.1)
            .unwrap();
        for (a, b) in g.value(y).data().iter().zip(normalized.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn bn_gamma_zero_gives_beta() {
        let mut rng = stream_rng(3, Stream::Aux);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut g = Graph::new();
        let v = g.constant(tensor(&[2, 3, 2, 2], &data));
        let gamma = g.constant(Tensor::zeros(&[3]));
        let beta = g.constant(tensor(&[3], &[0.3, -1.0, 2.5]));
        let mut rm = Tensor::zeros(&[3]);
        let mut rv = Tensor::full(&[3], 1.0);
        let y = g
            .batch_norm(v, gamma, beta, &mut rm, &mut rv, Mode::Train, true, 1e-5, 0.1)
            .unwrap();
        let yd = g.value(y);
        for img in 0..2 {
            for ch in 0..3 {
                for k in 0..4 {
                    let idx = (img * 3 + ch) * 4 + k;
                    assert_abs_diff_eq!(yd.data()[idx], beta_val(ch), epsilon = 1e-12);
                }
            }
        }
        fn beta_val(ch: usize) -> f64 {
            [0.3, -1.0, 2.5][ch]
        }
    }

    #[test]
    fn bn_train_standardizes_batch() {
        // derived oracle: direct mean/var computation on the output
        let mut rng = stream_rng(5, Stream::Aux);
        let (n, c, h, w) = (8, 3, 4, 4);
        let eps = 1e-5;
        let data: Vec<f64> = (0..n * c * h * w)
            .map(|_| rng.gen_range(-3.0..9.0))
            .collect();
        let mut g = Graph::new();
        let v = g.constant(tensor(&[n, c, h, w], &data));
        let gamma = g.constant(Tensor::full(&[c], 1.0));
        let beta = g.constant(Tensor::zeros(&[c]));
        let mut rm = Tensor::zeros(&[c]);
        let mut rv = Tensor::full(&[c], 1.0);
        let y = g
            .batch_norm(v, gamma, beta, &mut rm, &mut rv, Mode::Train, true, eps, 0.1)
            .unwrap();
        let yd = g.value(y).data();
        let rows = (n * h * w) as f64;
        for ch in 0..c {
            let mut vals = Vec::new();
            for img in 0..n {
                vals.extend_from_slice(&yd[(img * c + ch) * h * w..][..h * w]);
            }
            let mean = vals.iter().sum::<f64>() / rows;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-8);
            // output variance is var/(var+eps), slightly below 1
            let xvals: Vec<f64> = {
                let xd = &data;
                let mut out = Vec::new();
                for img in 0..n {
                    out.extend_from_slice(&xd[(img * c + ch) * h * w..][..h * w]);
                }
                out
            };
            let xmean = xvals.iter().sum::<f64>() / rows;
            let xvar = xvals.iter().map(|v| (v - xmean).powi(2)).sum::<f64>() / rows;
            assert_abs_diff_eq!(var, xvar / (xvar + eps), epsilon = 1e-6);
        }
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = stream_rng(9, Stream::Dropout);
        let mut g = Graph::new();
        let x = g.constant(tensor(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.dropout(x, 0.3, Mode::Eval, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_is_unbiased() {
        let n = 100_000;
        let mut rng = stream_rng(10, Stream::Dropout);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[n], 1.0));
        let y = g.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
        // Var of one inverted-dropout sample of 1.0 is rate/(1-rate)
        let se = (0.3f64 / 0.7 / n as f64).sqrt();
        assert!(
            (mean - 1.0).abs() < 3.0 * se,
            "sample mean {} outside 3 standard errors ({})",
            mean,
            se
        );
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut rng = stream_rng(9, Stream::Dropout);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4], 1.0));
        assert!(matches!(
            g.dropout(x, 1.0, Mode::Train, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[2], &[1.0, 2.0]), true);
        let d = g.detach(x);
        let y = g.mul(d, d);
        let loss = g.sum(y.unwrap());
        g.backward(loss).unwrap();
        assert!(g.grad_data(x).is_none());
    }

    #[test]
    fn matmul_variants_agree() {
        // a[2,3]·b[3,2] three ways
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c1 = vec![0.0; 4];
        matmul(&a, &b, &mut c1, 2, 3, 2);
        // bᵀ laid out as [2,3]
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = vec![0.0; 4];
        matmul_abt(&a, &bt, &mut c2, 2, 3, 2);
        // aᵀ laid out as [3,2]
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = vec![0.0; 4];
        matmul_atb(&at, &b, &mut c3, 2, 3, 2);
        assert_eq!(c1, c2);
        assert_eq!(c1, c3);
        assert_eq!(c1, vec![58.0, 64.0, 139.0, 154.0]);
    }
}
