//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients
//! into every node that requires them. Ops that never touch a
//! gradient-requiring input are recorded as constants, so e.g. a frozen
//! detector's weight gradients are never computed during a patch attack.

use std::collections::HashMap;

use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &mut GradStore)>;

struct Node {
    value: ArrayD<f64>,
    requires_grad: bool,
    retain: bool,
    backward: Option<BackwardFn>,
}

/// Per-node gradient slots populated during the backward pass.
pub struct GradStore {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn accumulate(&mut self, id: NodeId, g: ArrayD<f64>) {
        match &mut self.slots[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.slots[id].as_ref()
    }
}

/// Fixed bilinear gather: every output pixel reads up to four input pixels
/// of a square source with precomputed, geometry-derived weights.
#[derive(Debug, Clone)]
pub struct BilinearMap {
    pub out_h: usize,
    pub out_w: usize,
    pub source_side: usize,
    pub taps: Vec<TapSet>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TapSet {
    pub n: u8,
    pub idx: [u32; 4],
    pub w: [f64; 4],
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            retain: false,
            backward,
        });
        self.nodes.len() - 1
    }

    /// A differentiable input; its gradient is kept after `backward`.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, true, None)
    }

    /// A value with no gradient tracking.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, false, None)
    }

    /// Keep this node's gradient around for inspection after `backward`.
    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id].retain = true;
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.ndim(), 0);
        *v.first().expect("scalar node")
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn requires_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Backward pass from `root` (typically a scalar loss).
    pub fn backward(&self, root: NodeId) -> GradStore {
        self.backward_filtered(root, &HashMap::new())
    }

    /// Backward pass that element-multiplies the incoming gradient of a
    /// node by the given filter before propagating it further. Used by the
    /// gradient-flow tests to zero out background-pixel gradients.
    pub fn backward_filtered(
        &self,
        root: NodeId,
        filters: &HashMap<NodeId, ArrayD<f64>>,
    ) -> GradStore {
        let mut grads = GradStore::new(self.nodes.len());
        let seed = ArrayD::ones(self.nodes[root].value.raw_dim());
        grads.accumulate(root, seed);
        for id in (0..=root).rev() {
            let Some(mut g) = grads.slots[id].take() else {
                continue;
            };
            if let Some(f) = filters.get(&id) {
                g *= f;
            }
            match &self.nodes[id].backward {
                Some(bw) => {
                    bw(&g, &mut grads);
                    if self.nodes[id].retain {
                        grads.slots[id] = Some(g);
                    }
                }
                None => {
                    // Leaves and constants keep their accumulated gradient.
                    grads.slots[id] = Some(g);
                }
            }
        }
        grads
    }

    // ---- elementwise ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        let req = self.requires_any(&[a, b]);
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                if ra {
                    gs.accumulate(a, g.clone());
                }
                if rb {
                    gs.accumulate(b, g.clone());
                }
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) - self.value(b);
        let req = self.requires_any(&[a, b]);
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                if ra {
                    gs.accumulate(a, g.clone());
                }
                if rb {
                    gs.accumulate(b, g.mapv(|x| -x));
                }
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) * self.value(b);
        let req = self.requires_any(&[a, b]);
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let va = ra.then(|| self.value(b).clone());
        let vb = rb.then(|| self.value(a).clone());
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                if let Some(other) = &va {
                    gs.accumulate(a, g * other);
                }
                if let Some(other) = &vb {
                    gs.accumulate(b, g * other);
                }
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * s);
        let req = self.requires_grad(a);
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                gs.accumulate(a, g.mapv(|x| x * s));
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + s);
        let req = self.requires_grad(a);
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                gs.accumulate(a, g.clone());
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    /// Clamp to `[0,1]`. Gradient passes only where the input is strictly
    /// inside the interval, matching the flat regions of the function.
    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = x.mapv(|t| t.clamp(0.0, 1.0));
        let req = self.requires_grad(a);
        let pass = req.then(|| x.mapv(|t| f64::from(t > 0.0 && t < 1.0)));
        let bw: Option<BackwardFn> = req.then(|| {
            let pass = pass.unwrap();
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                gs.accumulate(a, g * &pass);
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let x = self.value(a);
        let v = x.mapv(|t| if t > 0.0 { t } else { slope * t });
        let req = self.requires_grad(a);
        let dmask = req.then(|| x.mapv(|t| if t > 0.0 { 1.0 } else { slope }));
        let bw: Option<BackwardFn> = req.then(|| {
            let dmask = dmask.unwrap();
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                gs.accumulate(a, g * &dmask);
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid_scalar);
        let req = self.requires_grad(a);
        let saved = req.then(|| v.clone());
        let bw: Option<BackwardFn> = req.then(|| {
            let y = saved.unwrap();
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                gs.accumulate(a, g * &y.mapv(|t| t * (1.0 - t)));
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ndarray::arr0(self.value(a).sum()).into_dyn();
        let req = self.requires_grad(a);
        let shape = self.value(a).raw_dim();
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let gv = *g.first().unwrap();
                gs.accumulate(a, ArrayD::from_elem(shape.clone(), gv));
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    /// Maximum over all elements; the subgradient goes to the first
    /// maximizer in row-major order.
    pub fn max_all(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        assert!(x.len() > 0, "max over empty tensor");
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0usize;
        for (i, &t) in x.iter().enumerate() {
            if t > best {
                best = t;
                arg = i;
            }
        }
        let v = ndarray::arr0(best).into_dyn();
        let req = self.requires_grad(a);
        let shape = x.raw_dim();
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let mut ga = ArrayD::zeros(shape.clone());
                ga.as_slice_mut().unwrap()[arg] = *g.first().unwrap();
                gs.accumulate(a, ga);
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        let total: f64 = terms.iter().map(|(w, id)| w * self.scalar(*id)).sum();
        let v = ndarray::arr0(total).into_dyn();
        let req = terms.iter().any(|(_, id)| self.requires_grad(*id));
        let captured: Vec<(f64, NodeId, bool)> = terms
            .iter()
            .map(|&(w, id)| (w, id, self.requires_grad(id)))
            .collect();
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let gv = *g.first().unwrap();
                for &(w, id, r) in &captured {
                    if r {
                        gs.accumulate(id, ndarray::arr0(w * gv).into_dyn());
                    }
                }
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    // ---- structural ops ----

    /// (H,W,3) → (3,H,W) with contiguous storage.
    pub fn hwc_to_chw(&mut self, a: NodeId) -> NodeId {
        let x = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("hwc tensor");
        let v = x
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let req = self.requires_grad(a);
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let gc = g.view().into_dimensionality::<Ix3>().unwrap();
                let back = gc
                    .permuted_axes([1, 2, 0])
                    .as_standard_layout()
                    .to_owned()
                    .into_dyn();
                gs.accumulate(a, back);
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    /// Channel slice `[lo, hi)` along axis 0 of a (C,H,W) tensor.
    pub fn slice_channels(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let x = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("chw tensor");
        let full = x.raw_dim();
        let v = x
            .slice(ndarray::s![lo..hi, .., ..])
            .to_owned()
            .into_dyn();
        let req = self.requires_grad(a);
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let mut ga = ndarray::Array3::<f64>::zeros(full);
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                ga.slice_mut(ndarray::s![lo..hi, .., ..]).assign(&gv);
                gs.accumulate(a, ga.into_dyn());
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    // ---- convolution ----

    /// 2-D convolution of a (Cin,H,W) input with a (Cout, Cin·kh·kw) weight
    /// matrix and a (Cout) bias, via im2col + gemm.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        cin: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let x = self
            .value(input)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv input (C,H,W)");
        let (xc, h, w) = x.dim();
        assert_eq!(xc, cin, "conv input channels");
        let w2 = self
            .value(weight)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("conv weight (Cout,K)");
        let (cout, k_len) = w2.dim();
        assert_eq!(k_len, cin * kernel * kernel, "conv weight columns");
        let b = self
            .value(bias)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv bias (Cout)");
        assert_eq!(b.len(), cout);

        let out_h = (h + 2 * pad - kernel) / stride + 1;
        let out_w = (w + 2 * pad - kernel) / stride + 1;
        let cols = im2col(&x.to_owned(), kernel, stride, pad, out_h, out_w);
        let mut y2 = w2.dot(&cols);
        y2 += &b.view().insert_axis(Axis(1));
        let v = y2
            .into_shape_with_order((cout, out_h, out_w))
            .unwrap()
            .into_dyn();

        let req_in = self.requires_grad(input);
        let req_w = self.requires_grad(weight);
        let req_b = self.requires_grad(bias);
        let req = req_in || req_w || req_b;
        let saved_cols = (req_w).then(|| cols.clone());
        let saved_w = req_in.then(|| w2.to_owned());
        let bw: Option<BackwardFn> = req.then(|| {
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let g2 = g3
                    .to_owned()
                    .into_shape_with_order((cout, out_h * out_w))
                    .unwrap();
                if req_b {
                    gs.accumulate(bias, g2.sum_axis(Axis(1)).into_dyn());
                }
                if let Some(cols) = &saved_cols {
                    gs.accumulate(weight, g2.dot(&cols.t()).into_dyn());
                }
                if let Some(w2) = &saved_w {
                    let gcols = w2.t().dot(&g2);
                    let gin = col2im(&gcols, cin, h, w, kernel, stride, pad, out_h, out_w);
                    gs.accumulate(input, gin.into_dyn());
                }
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    // ---- loss kernels ----

    /// Total variation per Eq-style interior index bounds: both squared
    /// differences are summed only for `i,j < S-1` (0-indexed), over all
    /// channels of a (S,S,C) tensor.
    pub fn tv(&mut self, a: NodeId) -> NodeId {
        let x = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("tv input (S,S,C)");
        let (s0, s1, ch) = x.dim();
        assert_eq!(s0, s1, "tv input must be square");
        assert!(s0 >= 2, "tv needs side >= 2");
        let mut total = 0.0;
        for i in 0..s0 - 1 {
            for j in 0..s1 - 1 {
                for c in 0..ch {
                    let p = x[[i, j, c]];
                    total += (p - x[[i + 1, j, c]]).powi(2);
                    total += (p - x[[i, j + 1, c]]).powi(2);
                }
            }
        }
        let v = ndarray::arr0(total).into_dyn();
        let req = self.requires_grad(a);
        let saved = req.then(|| x.to_owned());
        let bw: Option<BackwardFn> = req.then(|| {
            let x = saved.unwrap();
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let gv = *g.first().unwrap();
                let (s, _, ch) = x.dim();
                let mut ga = ndarray::Array3::<f64>::zeros(x.raw_dim());
                for i in 0..s - 1 {
                    for j in 0..s - 1 {
                        for c in 0..ch {
                            let p = x[[i, j, c]];
                            let dv = 2.0 * (p - x[[i + 1, j, c]]) * gv;
                            ga[[i, j, c]] += dv;
                            ga[[i + 1, j, c]] -= dv;
                            let dh = 2.0 * (p - x[[i, j + 1, c]]) * gv;
                            ga[[i, j, c]] += dh;
                            ga[[i, j + 1, c]] -= dh;
                        }
                    }
                }
                gs.accumulate(a, ga.into_dyn());
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    /// Non-printability score: per pixel, squared Euclidean distance to the
    /// nearest palette color, summed. Ties take the first minimizer.
    pub fn nps(&mut self, a: NodeId, palette: &Array2<f64>) -> NodeId {
        let x = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("nps input (S,S,3)");
        let (s0, s1, ch) = x.dim();
        assert_eq!(ch, 3, "nps input must be RGB");
        assert!(palette.nrows() > 0, "empty palette");
        let mut total = 0.0;
        let mut argmins = Vec::with_capacity(s0 * s1);
        for i in 0..s0 {
            for j in 0..s1 {
                let mut best = f64::INFINITY;
                let mut arg = 0usize;
                for (k, z) in palette.outer_iter().enumerate() {
                    let d = (0..3)
                        .map(|c| (x[[i, j, c]] - z[c]).powi(2))
                        .sum::<f64>();
                    if d < best {
                        best = d;
                        arg = k;
                    }
                }
                total += best;
                argmins.push(arg as u32);
            }
        }
        let v = ndarray::arr0(total).into_dyn();
        let req = self.requires_grad(a);
        let saved = req.then(|| (x.to_owned(), palette.clone(), argmins));
        let bw: Option<BackwardFn> = req.then(|| {
            let (x, palette, argmins) = saved.unwrap();
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let gv = *g.first().unwrap();
                let (s0, s1, _) = x.dim();
                let mut ga = ndarray::Array3::<f64>::zeros(x.raw_dim());
                for i in 0..s0 {
                    for j in 0..s1 {
                        let k = argmins[i * s1 + j] as usize;
                        for c in 0..3 {
                            ga[[i, j, c]] = 2.0 * (x[[i, j, c]] - palette[[k, c]]) * gv;
                        }
                    }
                }
                gs.accumulate(a, ga.into_dyn());
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    /// Binary cross-entropy with logits, positives weighted by `pos_weight`.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &ArrayD<f64>,
        pos_weight: f64,
    ) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape());
        let mut total = 0.0;
        for (&xi, &ti) in x.iter().zip(targets.iter()) {
            let w = 1.0 + (pos_weight - 1.0) * ti;
            total += w * (xi.max(0.0) - xi * ti + (-xi.abs()).exp().ln_1p());
        }
        let v = ndarray::arr0(total).into_dyn();
        let req = self.requires_grad(logits);
        let saved = req.then(|| (x.clone(), targets.clone()));
        let bw: Option<BackwardFn> = req.then(|| {
            let (x, t) = saved.unwrap();
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let gv = *g.first().unwrap();
                let mut ga = ArrayD::zeros(x.raw_dim());
                for ((gi, &xi), &ti) in ga.iter_mut().zip(x.iter()).zip(t.iter()) {
                    let w = 1.0 + (pos_weight - 1.0) * ti;
                    *gi = w * (sigmoid_scalar(xi) - ti) * gv;
                }
                gs.accumulate(logits, ga);
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    /// `Σ weight · (x - target)²` with constant target and weight tensors.
    pub fn weighted_sq_err(
        &mut self,
        pred: NodeId,
        target: &ArrayD<f64>,
        weight: &ArrayD<f64>,
    ) -> NodeId {
        let x = self.value(pred);
        assert_eq!(x.shape(), target.shape());
        assert_eq!(x.shape(), weight.shape());
        let mut total = 0.0;
        for ((&xi, &ti), &wi) in x.iter().zip(target.iter()).zip(weight.iter()) {
            total += wi * (xi - ti).powi(2);
        }
        let v = ndarray::arr0(total).into_dyn();
        let req = self.requires_grad(pred);
        let saved = req.then(|| (x.clone(), target.clone(), weight.clone()));
        let bw: Option<BackwardFn> = req.then(|| {
            let (x, t, w) = saved.unwrap();
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let gv = *g.first().unwrap();
                let mut ga = ArrayD::zeros(x.raw_dim());
                for (((gi, &xi), &ti), &wi) in
                    ga.iter_mut().zip(x.iter()).zip(t.iter()).zip(w.iter())
                {
                    *gi = 2.0 * wi * (xi - ti) * gv;
                }
                gs.accumulate(pred, ga);
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    // ---- compositing ops ----

    /// Gathers a (out_h, out_w, 3) canvas from a (side, side, 3) source via
    /// the fixed bilinear taps of `map`. Pixels without taps stay zero.
    pub fn bilinear_gather(&mut self, source: NodeId, map: &BilinearMap) -> NodeId {
        let x = self
            .value(source)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("gather source (S,S,3)");
        assert_eq!(x.dim(), (map.source_side, map.source_side, 3));
        let v = gather_forward(&x.to_owned(), map).into_dyn();
        let req = self.requires_grad(source);
        let saved = req.then(|| map.clone());
        let bw: Option<BackwardFn> = req.then(|| {
            let map = saved.unwrap();
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let side = map.source_side;
                let mut ga = ndarray::Array3::<f64>::zeros((side, side, 3));
                for (p, taps) in map.taps.iter().enumerate() {
                    if taps.n == 0 {
                        continue;
                    }
                    let (i, j) = (p / map.out_w, p % map.out_w);
                    for c in 0..3 {
                        let gp = g3[[i, j, c]];
                        for t in 0..taps.n as usize {
                            let idx = taps.idx[t] as usize;
                            ga[[idx / side, idx % side, c]] += taps.w[t] * gp;
                        }
                    }
                }
                gs.accumulate(source, ga.into_dyn());
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    /// Overwrites the footprint pixels of `base` with `canvas` placed at
    /// `(origin_y, origin_x)`; off-image canvas pixels are dropped.
    pub fn composite_region(
        &mut self,
        base: NodeId,
        canvas: NodeId,
        origin_y: i64,
        origin_x: i64,
        footprint: &Array2<u8>,
    ) -> NodeId {
        let b = self
            .value(base)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("base (H,W,3)");
        let cv = self
            .value(canvas)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("canvas (h,w,3)");
        let (h, w, _) = b.dim();
        let (ch, cw, _) = cv.dim();
        assert_eq!(footprint.dim(), (ch, cw));
        let mut out = b.to_owned();
        for ((i, j), &m) in footprint.indexed_iter() {
            if m != 1 {
                continue;
            }
            let (y, x) = (origin_y + i as i64, origin_x + j as i64);
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                continue;
            }
            for c in 0..3 {
                out[[y as usize, x as usize, c]] = cv[[i, j, c]];
            }
        }
        let v = out.into_dyn();
        let req = self.requires_any(&[base, canvas]);
        let (rb, rc) = (self.requires_grad(base), self.requires_grad(canvas));
        let fp = req.then(|| footprint.clone());
        let bw: Option<BackwardFn> = req.then(|| {
            let fp = fp.unwrap();
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (h, w, _) = g3.dim();
                if rc {
                    let mut gc = ndarray::Array3::<f64>::zeros((ch, cw, 3));
                    for ((i, j), &m) in fp.indexed_iter() {
                        if m != 1 {
                            continue;
                        }
                        let (y, x) = (origin_y + i as i64, origin_x + j as i64);
                        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                            continue;
                        }
                        for c in 0..3 {
                            gc[[i, j, c]] = g3[[y as usize, x as usize, c]];
                        }
                    }
                    gs.accumulate(canvas, gc.into_dyn());
                }
                if rb {
                    let mut gb = g3.to_owned();
                    for ((i, j), &m) in fp.indexed_iter() {
                        if m != 1 {
                            continue;
                        }
                        let (y, x) = (origin_y + i as i64, origin_x + j as i64);
                        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                            continue;
                        }
                        for c in 0..3 {
                            gb[[y as usize, x as usize, c]] = 0.0;
                        }
                    }
                    gs.accumulate(base, gb.into_dyn());
                }
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }

    /// Full-frame masked select, the traced form of Eq.-1 compositing.
    pub fn composite_masked(
        &mut self,
        base: NodeId,
        overlay: NodeId,
        mask: &Array2<u8>,
    ) -> NodeId {
        let b = self
            .value(base)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("base (H,W,3)");
        let o = self
            .value(overlay)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("overlay (H,W,3)");
        assert_eq!(b.dim(), o.dim());
        assert_eq!((b.dim().0, b.dim().1), mask.dim());
        let mut out = b.to_owned();
        for ((i, j), &m) in mask.indexed_iter() {
            if m == 1 {
                for c in 0..3 {
                    out[[i, j, c]] = o[[i, j, c]];
                }
            }
        }
        let v = out.into_dyn();
        let req = self.requires_any(&[base, overlay]);
        let (rb, ro) = (self.requires_grad(base), self.requires_grad(overlay));
        let mk = req.then(|| mask.clone());
        let bw: Option<BackwardFn> = req.then(|| {
            let mask = mk.unwrap();
            Box::new(move |g: &ArrayD<f64>, gs: &mut GradStore| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                if ro {
                    let mut go = ndarray::Array3::<f64>::zeros(g3.raw_dim());
                    for ((i, j), &m) in mask.indexed_iter() {
                        if m == 1 {
                            for c in 0..3 {
                                go[[i, j, c]] = g3[[i, j, c]];
                            }
                        }
                    }
                    gs.accumulate(overlay, go.into_dyn());
                }
                if rb {
                    let mut gb = g3.to_owned();
                    for ((i, j), &m) in mask.indexed_iter() {
                        if m == 1 {
                            for c in 0..3 {
                                gb[[i, j, c]] = 0.0;
                            }
                        }
                    }
                    gs.accumulate(base, gb.into_dyn());
                }
            }) as BackwardFn
        });
        self.push(v, req, bw)
    }
}

/// Adaptive-moment gradient descent with the standard coefficient defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, shape: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: ArrayD::zeros(IxDyn(shape)),
            v: ArrayD::zeros(IxDyn(shape)),
            t: 0,
        }
    }

    pub fn step(&mut self, param: &mut ArrayD<f64>, grad: &ArrayD<f64>) {
        assert_eq!(param.shape(), grad.shape());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / b1t;
            let vhat = *v / b2t;
            *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// Forward pass of the fixed bilinear gather, shared with non-traced code.
pub fn gather_forward(source: &ndarray::Array3<f64>, map: &BilinearMap) -> ndarray::Array3<f64> {
    let side = map.source_side;
    let mut out = ndarray::Array3::<f64>::zeros((map.out_h, map.out_w, 3));
    for (p, taps) in map.taps.iter().enumerate() {
        if taps.n == 0 {
            continue;
        }
        let (i, j) = (p / map.out_w, p % map.out_w);
        for c in 0..3 {
            let mut acc = 0.0;
            for t in 0..taps.n as usize {
                let idx = taps.idx[t] as usize;
                acc += taps.w[t] * source[[idx / side, idx % side, c]];
            }
            out[[i, j, c]] = acc;
        }
    }
    out
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unfolds (C,H,W) into (C·k·k, out_h·out_w) patches with zero padding.
fn im2col(
    x: &ndarray::Array3<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * kernel * kernel, out_h * out_w));
    for c in 0..cin {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let mut out_row = cols.row_mut(row);
            for oy in 0..out_h {
                    let iy = (oy * stride + ki) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        out_row[oy * out_w + ox] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im(
    gcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> ndarray::Array3<f64> {
    let mut gin = ndarray::Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let grow = gcols.row(row);
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        gin[[c, iy as usize, ix as usize]] += grow[oy * out_w + ox];
                    }
                }
            }
        }
    }
    gin
}

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr0, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Central-difference gradient of `f` at `x`, one coordinate at a time.
    fn finite_diff(x: &ArrayD<f64>, f: &dyn Fn(&ArrayD<f64>) -> f64, step: f64) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = x.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + step;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - step;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
        }
        g
    }

    fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    fn random_arr(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..=1.0))
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x0 = random_arr(&mut rng, &[4, 3]);
        let y0 = random_arr(&mut rng, &[4, 3]);

        // loss = sum( (a*b + 0.3a - b) * sigmoid(a) ) style composite
        let eval = |a: &ArrayD<f64>, b: &ArrayD<f64>| -> (f64, ArrayD<f64>, ArrayD<f64>) {
            let mut t = Tape::new();
            let na = t.leaf(a.clone());
            let nb = t.leaf(b.clone());
            let prod = t.mul(na, nb);
            let sa = t.scale(na, 0.3);
            let sum1 = t.add(prod, sa);
            let diff = t.sub(sum1, nb);
            let sig = t.sigmoid(na);
            let out = t.mul(diff, sig);
            let loss = t.sum_all(out);
            let grads = t.backward(loss);
            (
                t.scalar(loss),
                grads.get(na).unwrap().clone(),
                grads.get(nb).unwrap().clone(),
            )
        };
        let (_, ga, gb) = eval(&x0, &y0);
        let fa = finite_diff(&x0, &|v| eval(v, &y0).0, 1e-6);
        let fb = finite_diff(&y0, &|v| eval(&x0, v).0, 1e-6);
        assert!(max_rel_err(&ga, &fa) < 1e-6, "{}", max_rel_err(&ga, &fa));
        assert!(max_rel_err(&gb, &fb) < 1e-6);
    }

    #[test]
    fn leaky_relu_and_clamp_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        // keep values away from the kinks
        let x0 = ArrayD::from_shape_fn(IxDyn(&[10]), |_| {
            let v: f64 = rng.random_range(-0.9..=0.9);
            if v.abs() < 0.05 {
                0.2
            } else {
                v
            }
        });
        let eval = |a: &ArrayD<f64>| -> (f64, Option<ArrayD<f64>>) {
            let mut t = Tape::new();
            let na = t.leaf(a.clone());
            let lr = t.leaky_relu(na, 0.1);
            let half = t.scale(lr, 0.5);
            let shifted = t.add_scalar(half, 0.4);
            let cl = t.clamp01(shifted);
            let loss = t.sum_all(cl);
            let grads = t.backward(loss);
            (t.scalar(loss), grads.get(na).cloned())
        };
        let (_, g) = eval(&x0);
        let fd = finite_diff(&x0, &|v| eval(v).0, 1e-6);
        assert!(max_rel_err(&g.unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x0 = random_arr(&mut rng, &[2, 6, 6]);
        let w0 = random_arr(&mut rng, &[3, 2 * 9]);
        let b0 = random_arr(&mut rng, &[3]);
        let eval = |xi: &ArrayD<f64>,
                    wi: &ArrayD<f64>,
                    bi: &ArrayD<f64>|
         -> (f64, ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
            let mut t = Tape::new();
            let nx = t.leaf(xi.clone());
            let nw = t.leaf(wi.clone());
            let nb = t.leaf(bi.clone());
            let y = t.conv2d(nx, nw, nb, 2, 3, 2, 1);
            let sq = t.mul(y, y);
            let loss = t.sum_all(sq);
            let grads = t.backward(loss);
            (
                t.scalar(loss),
                grads.get(nx).unwrap().clone(),
                grads.get(nw).unwrap().clone(),
                grads.get(nb).unwrap().clone(),
            )
        };
        let (_, gx, gw, gb) = eval(&x0, &w0, &b0);
        let fx = finite_diff(&x0, &|v| eval(v, &w0, &b0).0, 1e-6);
        let fw = finite_diff(&w0, &|v| eval(&x0, v, &b0).0, 1e-6);
        let fb = finite_diff(&b0, &|v| eval(&x0, &w0, v).0, 1e-6);
        assert!(max_rel_err(&gx, &fx) < 1e-5, "{}", max_rel_err(&gx, &fx));
        assert!(max_rel_err(&gw, &fw) < 1e-5);
        assert!(max_rel_err(&gb, &fb) < 1e-5);
    }

    #[test]
    fn conv2d_skips_weight_grads_for_constant_weights() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x0 = random_arr(&mut rng, &[1, 4, 4]);
        let w0 = random_arr(&mut rng, &[2, 9]);
        let b0 = random_arr(&mut rng, &[2]);
        let mut t = Tape::new();
        let nx = t.leaf(x0);
        let nw = t.constant(w0);
        let nb = t.constant(b0);
        let y = t.conv2d(nx, nw, nb, 1, 3, 1, 1);
        let loss = t.sum_all(y);
        let grads = t.backward(loss);
        assert!(grads.get(nx).is_some());
        assert!(grads.get(nw).is_none());
        assert!(grads.get(nb).is_none());
    }

    #[test]
    fn max_all_routes_gradient_to_first_maximizer() {
        let mut t = Tape::new();
        let a = t.leaf(ndarray::arr1(&[1.0, 3.0, 3.0, 2.0]).into_dyn());
        let m = t.max_all(a);
        assert_eq!(t.scalar(m), 3.0);
        let grads = t.backward(m);
        let g = grads.get(a).unwrap();
        assert_eq!(g.as_slice().unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn tv_matches_finite_differences_and_closed_form() {
        // 2x2 single channel [[0,1],[1,0]] -> 2.0
        let mut t = Tape::new();
        let x = Array3::from_shape_vec((2, 2, 1), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let n = t.leaf(x.into_dyn());
        let tv = t.tv(n);
        assert_eq!(t.scalar(tv), 2.0);

        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x0 = random_arr(&mut rng, &[5, 5, 3]);
        let eval = |v: &ArrayD<f64>| -> (f64, Option<ArrayD<f64>>) {
            let mut t = Tape::new();
            let n = t.leaf(v.clone());
            let tv = t.tv(n);
            let g = t.backward(tv);
            (t.scalar(tv), g.get(n).cloned())
        };
        let (_, g) = eval(&x0);
        let fd = finite_diff(&x0, &|v| eval(v).0, 1e-6);
        assert!(max_rel_err(&g.unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn nps_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[4, 4, 3]), |_| rng.random_range(0.05..=0.95));
        let palette =
            Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let eval = |v: &ArrayD<f64>| -> (f64, Option<ArrayD<f64>>) {
            let mut t = Tape::new();
            let n = t.leaf(v.clone());
            let l = t.nps(n, &palette);
            let g = t.backward(l);
            (t.scalar(l), g.get(n).cloned())
        };
        let (_, g) = eval(&x0);
        let fd = finite_diff(&x0, &|v| eval(v).0, 1e-6);
        assert!(max_rel_err(&g.unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn bce_and_weighted_sq_err_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let x0 = random_arr(&mut rng, &[3, 3]);
        let targets = ArrayD::from_shape_fn(IxDyn(&[3, 3]), |_| f64::from(rng.random::<bool>()));
        let tgt2 = random_arr(&mut rng, &[3, 3]);
        let wts = ArrayD::from_shape_fn(IxDyn(&[3, 3]), |_| rng.random_range(0.0..=2.0));
        let eval = |v: &ArrayD<f64>| -> (f64, Option<ArrayD<f64>>) {
            let mut t = Tape::new();
            let n = t.leaf(v.clone());
            let l1 = t.bce_with_logits(n, &targets, 4.0);
            let l2 = t.weighted_sq_err(n, &tgt2, &wts);
            let l = t.weighted_sum(&[(1.0, l1), (0.7, l2)]);
            let g = t.backward(l);
            (t.scalar(l), g.get(n).cloned())
        };
        let (_, g) = eval(&x0);
        let fd = finite_diff(&x0, &|v| eval(v).0, 1e-6);
        assert!(max_rel_err(&g.unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn structural_ops_round_trip_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let x0 = random_arr(&mut rng, &[4, 5, 3]);
        let eval = |v: &ArrayD<f64>| -> (f64, Option<ArrayD<f64>>) {
            let mut t = Tape::new();
            let n = t.leaf(v.clone());
            let chw = t.hwc_to_chw(n);
            let sl = t.slice_channels(chw, 1, 3);
            let sq = t.mul(sl, sl);
            let l = t.sum_all(sq);
            let g = t.backward(l);
            (t.scalar(l), g.get(n).cloned())
        };
        let (_, g) = eval(&x0);
        let fd = finite_diff(&x0, &|v| eval(v).0, 1e-6);
        assert!(max_rel_err(&g.unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn composite_masked_grad_is_mask_select() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let base0 = random_arr(&mut rng, &[4, 4, 3]);
        let over0 = random_arr(&mut rng, &[4, 4, 3]);
        let mut mask = Array2::<u8>::zeros((4, 4));
        for i in 0..4 {
            for j in 0..4 {
                mask[[i, j]] = u8::from(rng.random::<bool>());
            }
        }
        let eval = |b: &ArrayD<f64>, o: &ArrayD<f64>| -> (f64, ArrayD<f64>, ArrayD<f64>) {
            let mut t = Tape::new();
            let nb = t.leaf(b.clone());
            let no = t.leaf(o.clone());
            let out = t.composite_masked(nb, no, &mask);
            let sq = t.mul(out, out);
            let l = t.sum_all(sq);
            let g = t.backward(l);
            (
                t.scalar(l),
                g.get(nb).unwrap().clone(),
                g.get(no).unwrap().clone(),
            )
        };
        let (_, gb, go) = eval(&base0, &over0);
        let fb = finite_diff(&base0, &|v| eval(v, &over0).0, 1e-6);
        let fo = finite_diff(&over0, &|v| eval(&base0, v).0, 1e-6);
        assert!(max_rel_err(&gb, &fb) < 1e-6);
        assert!(max_rel_err(&go, &fo) < 1e-6);
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let mut t = Tape::new();
        let a = t.leaf(arr0(2.0).into_dyn());
        let b = t.leaf(arr0(5.0).into_dyn());
        let s = t.weighted_sum(&[(1.5, a), (-0.5, b)]);
        assert_eq!(t.scalar(s), 0.5);
        let g = t.backward(s);
        assert_eq!(*g.get(a).unwrap().first().unwrap(), 1.5);
        assert_eq!(*g.get(b).unwrap().first().unwrap(), -0.5);
    }
}
