use crate::error::{Error, Result};

/// Dense row-major array of f64 values. Shape `[]` is a scalar with one
/// element. Immutable once built; all ops return fresh tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Graph(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![1.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a shape-[] or single-element tensor.
    pub fn to_scalar(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Graph(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Broadcast result shape under the size-1-axis rule, or None if incompatible.
/// Shapes are aligned at the trailing axis; missing leading axes act as 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return None;
        };
    }
    Some(out)
}

/// Row-major strides of `shape`.
fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `shape` viewed under the (broader) `oshape`: zero where the
/// axis is broadcast, including implicit leading axes.
fn broadcast_strides(shape: &[usize], oshape: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = oshape.len() - shape.len();
    let mut s = vec![0usize; oshape.len()];
    for i in 0..oshape.len() {
        if i >= pad && shape[i - pad] != 1 {
            s[i] = own[i - pad];
        }
    }
    s
}

/// Odometer over `oshape` driving two source offsets.
fn for_each_broadcast2(
    oshape: &[usize],
    astr: &[usize],
    bstr: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(oshape);
    let rank = oshape.len();
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, ao, bo);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ao += astr[ax];
            bo += bstr[ax];
            if idx[ax] < oshape[ax] {
                break;
            }
            idx[ax] = 0;
            ao -= astr[ax] * oshape[ax];
            bo -= bstr[ax] * oshape[ax];
        }
    }
}

/// Elementwise binary op with broadcasting. None on incompatible shapes.
pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Option<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Some(Tensor { shape: a.shape.clone(), data });
    }
    let oshape = broadcast_shape(&a.shape, &b.shape)?;
    let astr = broadcast_strides(&a.shape, &oshape);
    let bstr = broadcast_strides(&b.shape, &oshape);
    let mut data = vec![0.0; numel(&oshape)];
    for_each_broadcast2(&oshape, &astr, &bstr, |o, ao, bo| {
        data[o] = f(a.data[ao], b.data[bo]);
    });
    Some(Tensor { shape: oshape, data })
}

/// Sum `g` down to `tshape` (the inverse of broadcasting to `g`'s shape).
pub(crate) fn reduce_to_shape(g: &Tensor, tshape: &[usize]) -> Tensor {
    if g.shape == tshape {
        return g.clone();
    }
    let tstr = broadcast_strides(tshape, &g.shape);
    let zstr = vec![0usize; g.shape.len()];
    let mut out = Tensor::zeros(tshape);
    for_each_broadcast2(&g.shape, &tstr, &zstr, |o, to, _| {
        out.data[to] += g.data[o];
    });
    out
}

/// 2-D matrix multiply.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub(crate) fn transpose2(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor { shape: vec![n, m], data }
}

/// Reduced output shape after collapsing `axes` (empty axes = all axes).
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize], keepdims: bool) -> Vec<usize> {
    let all: Vec<usize> = (0..shape.len()).collect();
    let axes = if axes.is_empty() { &all[..] } else { axes };
    let mut out = Vec::new();
    for (i, &e) in shape.iter().enumerate() {
        if axes.contains(&i) {
            if keepdims {
                out.push(1);
            }
        } else {
            out.push(e);
        }
    }
    out
}

/// Sum over `axes` (empty = all). Output shape per `reduced_shape`.
pub(crate) fn sum_axes(t: &Tensor, axes: &[usize], keepdims: bool) -> Tensor {
    let oshape = reduced_shape(&t.shape, axes, keepdims);
    // Accumulate through the keepdims view, then fix up the shape.
    let kshape = reduced_shape(&t.shape, axes, true);
    let kstr = broadcast_strides(&kshape, &t.shape);
    let zstr = vec![0usize; t.shape.len()];
    let mut acc = vec![0.0; numel(&kshape)];
    for_each_broadcast2(&t.shape, &kstr, &zstr, |o, ko, _| {
        acc[ko] += t.data[o];
    });
    Tensor { shape: oshape, data: acc }
}

/// Number of elements collapsed by a reduction over `axes`.
pub(crate) fn reduced_count(shape: &[usize], axes: &[usize]) -> usize {
    if axes.is_empty() {
        numel(shape)
    } else {
        axes.iter().map(|&a| shape[a]).product()
    }
}

/// Log-sum-exp over one axis with max-shift stabilization.
pub(crate) fn logsumexp_axis(t: &Tensor, axis: usize, keepdims: bool) -> Tensor {
    let oshape = reduced_shape(&t.shape, &[axis], keepdims);
    let kshape = reduced_shape(&t.shape, &[axis], true);
    let kstr = broadcast_strides(&kshape, &t.shape);
    let zstr = vec![0usize; t.shape.len()];
    let kn = numel(&kshape);
    let mut maxes = vec![f64::NEG_INFINITY; kn];
    for_each_broadcast2(&t.shape, &kstr, &zstr, |o, ko, _| {
        if t.data[o] > maxes[ko] {
            maxes[ko] = t.data[o];
        }
    });
    let mut sums = vec![0.0; kn];
    for_each_broadcast2(&t.shape, &kstr, &zstr, |o, ko, _| {
        sums[ko] += (t.data[o] - maxes[ko]).exp();
    });
    let data = maxes
        .iter()
        .zip(sums.iter())
        .map(|(&m, &s)| m + s.ln())
        .collect();
    Tensor { shape: oshape, data }
}

/// Expand a reduced tensor back to `shape` (reinserting collapsed axes).
pub(crate) fn expand_from_reduced(
    g: &Tensor,
    shape: &[usize],
    axes: &[usize],
    keepdims: bool,
) -> Tensor {
    let kshape = reduced_shape(shape, axes, true);
    let kept = if keepdims {
        g.clone()
    } else {
        Tensor { shape: kshape.clone(), data: g.data.clone() }
    };
    let kstr = broadcast_strides(&kept.shape, shape);
    let zstr = vec![0usize; shape.len()];
    let mut out = Tensor::zeros(shape);
    for_each_broadcast2(shape, &kstr, &zstr, |o, ko, _| {
        out.data[o] = kept.data[ko];
    });
    out
}

/// Concatenate along `axis`. Shapes must agree elsewhere.
pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0].shape.clone();
    let mut axis_total = 0usize;
    for p in parts {
        axis_total += p.shape[axis];
    }
    let mut oshape = first.clone();
    oshape[axis] = axis_total;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut data = vec![0.0; numel(&oshape)];
    let ostride = axis_total * inner;
    let mut axis_off = 0usize;
    for p in parts {
        let pa = p.shape[axis];
        for ou in 0..outer {
            let src = &p.data[ou * pa * inner..(ou + 1) * pa * inner];
            let dst_start = ou * ostride + axis_off * inner;
            data[dst_start..dst_start + pa * inner].copy_from_slice(src);
        }
        axis_off += pa;
    }
    Tensor::from_vec(oshape, data)
}

/// Select `indices` along `axis` (duplicates allowed).
pub(crate) fn index_select(t: &Tensor, axis: usize, indices: &[usize]) -> Tensor {
    let mut oshape = t.shape.clone();
    oshape[axis] = indices.len();
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product();
    let ext = t.shape[axis];
    let mut data = Vec::with_capacity(numel(&oshape));
    for ou in 0..outer {
        for &ix in indices {
            let start = ou * ext * inner + ix * inner;
            data.extend_from_slice(&t.data[start..start + inner]);
        }
    }
    Tensor { shape: oshape, data }
}

/// Scatter-add the rows of `g` (laid out like an index_select output) back
/// into a zero tensor of `shape`.
pub(crate) fn index_select_backward(
    g: &Tensor,
    shape: &[usize],
    axis: usize,
    indices: &[usize],
) -> Tensor {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ext = shape[axis];
    let mut out = Tensor::zeros(shape);
    let sel = indices.len();
    for ou in 0..outer {
        for (row, &ix) in indices.iter().enumerate() {
            let src = ou * sel * inner + row * inner;
            let dst = ou * ext * inner + ix * inner;
            for k in 0..inner {
                out.data[dst + k] += g.data[src + k];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[], &[4, 2]), Some(vec![4, 2]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn binary_broadcast_matches_manual() {
        let a = Tensor::from_vec(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = broadcast_binary(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
    }

    #[test]
    fn reduce_to_shape_inverts_broadcast() {
        let g = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = reduce_to_shape(&g, &[1, 3]);
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r.data(), &[6.0, 15.0]);
        let r = reduce_to_shape(&g, &[]);
        assert_eq!(r.data(), &[21.0]);
    }

    #[test]
    fn matmul_2x2() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn sum_and_lse() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = sum_axes(&t, &[0], true);
        assert_eq!(s.shape(), &[1, 3]);
        assert_eq!(s.data(), &[5.0, 7.0, 9.0]);
        let s = sum_axes(&t, &[], false);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.data(), &[21.0]);

        let l = logsumexp_axis(&t, 1, false);
        assert_eq!(l.shape(), &[2]);
        let expect = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((l.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn concat_and_select() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![9.0, 8.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let s = index_select(&c, 1, &[2, 0]);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[9.0, 1.0, 8.0, 3.0]);

        let g = Tensor::ones(&[2, 2]);
        let back = index_select_backward(&g, &[2, 3], 1, &[2, 0]);
        assert_eq!(back.data(), &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    }
}
