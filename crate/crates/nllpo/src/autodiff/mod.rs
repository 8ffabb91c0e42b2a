//! Reverse-mode differentiation over named parameter vectors.
//!
//! A loss is anything that can rebuild itself on a [`Tape`] for an arbitrary
//! scalar type; gradients come from one reverse sweep with `f64`, and
//! Hessian-vector products from the same sweep run with [`Dual`] scalars
//! seeded along the requested direction (forward-over-reverse).

mod scalar;
mod tape;

pub use scalar::{Dual, Scalar};
pub use tape::{NodeId, Tape, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {a:?} vs {b:?}")]
    ShapeMismatch { op: &'static str, a: (usize, usize), b: (usize, usize) },
    #[error("unsupported primitive: {0}")]
    UnsupportedPrimitive(&'static str),
    #[error("loss evaluated to a non-finite value")]
    NonFiniteLoss,
    #[error("parameter vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Handle to one named slice of a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentId(usize);

#[derive(Debug, Clone)]
pub struct SegmentInfo {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl SegmentInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Flat parameter storage with named, shaped, disjoint and covering segments.
#[derive(Debug, Clone, Default)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<SegmentInfo>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_segment(&mut self, name: &str, rows: usize, cols: usize, init: Vec<f64>) -> SegmentId {
        assert_eq!(init.len(), rows * cols, "segment init length mismatch");
        let offset = self.values.len();
        self.values.extend_from_slice(&init);
        self.segments.push(SegmentInfo { name: name.to_string(), offset, rows, cols });
        SegmentId(self.segments.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<(), AutodiffError> {
        if values.len() != self.values.len() {
            return Err(AutodiffError::LengthMismatch {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn segments(&self) -> &[SegmentInfo] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &SegmentInfo {
        &self.segments[id.0]
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = SegmentId> {
        (0..self.segments.len()).map(SegmentId)
    }

    pub fn find(&self, name: &str) -> Option<SegmentId> {
        self.segments.iter().position(|s| s.name == name).map(SegmentId)
    }

    pub fn slice(&self, id: SegmentId) -> &[f64] {
        let s = &self.segments[id.0];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, id: SegmentId) -> &mut [f64] {
        let s = self.segments[id.0].clone();
        &mut self.values[s.offset..s.offset + s.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-segment tape nodes for one bound parameter vector.
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: SegmentId) -> NodeId {
        self.nodes[id.0]
    }
}

/// Binds every segment of `pv` as a leaf tensor, optionally seeding the
/// forward tangent direction (ignored for plain `f64` tapes).
pub fn bind<S: Scalar>(tape: &mut Tape<S>, pv: &ParamVector, tangent: Option<&[f64]>) -> Bound {
    if let Some(t) = tangent {
        assert_eq!(t.len(), pv.len(), "tangent length mismatch");
    }
    let mut nodes = Vec::with_capacity(pv.segments().len());
    for seg in pv.segments() {
        let values = &pv.values()[seg.offset..seg.offset + seg.len()];
        let tensor = match tangent {
            Some(t) => Tensor::from_values_tangents(
                seg.rows,
                seg.cols,
                values,
                &t[seg.offset..seg.offset + seg.len()],
            ),
            None => Tensor::from_values(seg.rows, seg.cols, values),
        };
        nodes.push(tape.leaf(tensor));
    }
    Bound { nodes }
}

/// A scalar loss over one parameter vector, rebuildable on any tape.
pub trait DiffFn {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError>;
}

/// A scalar loss over an (outer, inner) parameter pair.
pub trait BilevelFn {
    fn build<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        phi: &Bound,
        theta: &Bound,
    ) -> Result<NodeId, AutodiffError>;
}

fn collect<S: Scalar>(
    adjoints: &[Tensor<S>],
    pv: &ParamVector,
    bound: &Bound,
    take: impl Fn(S) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(pv.len());
    for id in pv.segment_ids() {
        out.extend(adjoints[bound.node(id)].data().iter().map(|s| take(*s)));
    }
    out
}

fn check_root<S: Scalar>(tape: &Tape<S>, root: NodeId) -> Result<(), AutodiffError> {
    if !tape.value(root).data()[0].value().is_finite() {
        return Err(AutodiffError::NonFiniteLoss);
    }
    Ok(())
}

/// Loss value at a point.
pub fn loss_value(f: &impl DiffFn, at: &ParamVector) -> Result<f64, AutodiffError> {
    let mut tape = Tape::<f64>::new();
    let bound = bind(&mut tape, at, None);
    let root = f.build(&mut tape, &bound)?;
    check_root(&tape, root)?;
    Ok(tape.value(root).data()[0])
}

/// Gradient of the loss at a point, flattened in segment order.
pub fn gradient(f: &impl DiffFn, at: &ParamVector) -> Result<Vec<f64>, AutodiffError> {
    Ok(value_and_gradient(f, at)?.1)
}

pub fn value_and_gradient(
    f: &impl DiffFn,
    at: &ParamVector,
) -> Result<(f64, Vec<f64>), AutodiffError> {
    let mut tape = Tape::<f64>::new();
    let bound = bind(&mut tape, at, None);
    let root = f.build(&mut tape, &bound)?;
    check_root(&tape, root)?;
    let adjoints = tape.backward(root)?;
    let grad = collect(&adjoints, at, &bound, |s| s);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(AutodiffError::NonFiniteLoss);
    }
    Ok((tape.value(root).data()[0], grad))
}

/// Hessian-vector product (∇²f)·v by forward-over-reverse.
pub fn hvp(f: &impl DiffFn, at: &ParamVector, v: &[f64]) -> Result<Vec<f64>, AutodiffError> {
    if v.len() != at.len() {
        return Err(AutodiffError::LengthMismatch { expected: at.len(), got: v.len() });
    }
    let mut tape = Tape::<Dual>::new();
    let bound = bind(&mut tape, at, Some(v));
    let root = f.build(&mut tape, &bound)?;
    check_root(&tape, root)?;
    let adjoints = tape.backward(root)?;
    Ok(collect(&adjoints, at, &bound, |s| s.tangent()))
}

/// Value of a bilevel inner loss.
pub fn bilevel_value(
    f: &impl BilevelFn,
    phi: &ParamVector,
    theta: &ParamVector,
) -> Result<f64, AutodiffError> {
    let mut tape = Tape::<f64>::new();
    let bp = bind(&mut tape, phi, None);
    let bt = bind(&mut tape, theta, None);
    let root = f.build(&mut tape, &bp, &bt)?;
    check_root(&tape, root)?;
    Ok(tape.value(root).data()[0])
}

/// ∇_θ of a bilevel loss with φ held fixed.
pub fn grad_theta(
    f: &impl BilevelFn,
    phi: &ParamVector,
    theta: &ParamVector,
) -> Result<Vec<f64>, AutodiffError> {
    let mut tape = Tape::<f64>::new();
    let bp = bind(&mut tape, phi, None);
    let bt = bind(&mut tape, theta, None);
    let root = f.build(&mut tape, &bp, &bt)?;
    check_root(&tape, root)?;
    let adjoints = tape.backward(root)?;
    Ok(collect(&adjoints, theta, &bt, |s| s))
}

/// ∇_φ of a bilevel loss with θ held fixed.
pub fn grad_phi(
    f: &impl BilevelFn,
    phi: &ParamVector,
    theta: &ParamVector,
) -> Result<Vec<f64>, AutodiffError> {
    let mut tape = Tape::<f64>::new();
    let bp = bind(&mut tape, phi, None);
    let bt = bind(&mut tape, theta, None);
    let root = f.build(&mut tape, &bp, &bt)?;
    check_root(&tape, root)?;
    let adjoints = tape.backward(root)?;
    Ok(collect(&adjoints, phi, &bp, |s| s))
}

/// (∇²_θ f)·v with φ held fixed.
pub fn hvp_theta(
    f: &impl BilevelFn,
    phi: &ParamVector,
    theta: &ParamVector,
    v: &[f64],
) -> Result<Vec<f64>, AutodiffError> {
    if v.len() != theta.len() {
        return Err(AutodiffError::LengthMismatch { expected: theta.len(), got: v.len() });
    }
    let mut tape = Tape::<Dual>::new();
    let bp = bind(&mut tape, phi, None);
    let bt = bind(&mut tape, theta, Some(v));
    let root = f.build(&mut tape, &bp, &bt)?;
    check_root(&tape, root)?;
    let adjoints = tape.backward(root)?;
    Ok(collect(&adjoints, theta, &bt, |s| s.tangent()))
}

/// Mixed second derivative ∇_φ⟨∇_θ f, v⟩ with v treated as a constant.
///
/// Seeding the θ tangents with v makes the tangent of the φ-adjoint equal to
/// (∇_φ∇_θ f)·v, which is the quantity the implicit-function solver needs.
pub fn cross_grad(
    f: &impl BilevelFn,
    phi: &ParamVector,
    theta: &ParamVector,
    v: &[f64],
) -> Result<Vec<f64>, AutodiffError> {
    if v.len() != theta.len() {
        return Err(AutodiffError::LengthMismatch { expected: theta.len(), got: v.len() });
    }
    let mut tape = Tape::<Dual>::new();
    let bp = bind(&mut tape, phi, None);
    let bt = bind(&mut tape, theta, Some(v));
    let root = f.build(&mut tape, &bp, &bt)?;
    check_root(&tape, root)?;
    let adjoints = tape.backward(root)?;
    Ok(collect(&adjoints, phi, &bp, |s| s.tangent()))
}

/// Central finite differences of a loss, for gradient checks in tests and
/// diagnostics. Deliberately independent of the reverse sweep.
pub fn finite_diff_gradient(
    f: &impl DiffFn,
    at: &ParamVector,
    h: f64,
) -> Result<Vec<f64>, AutodiffError> {
    let mut point = at.clone();
    let mut grad = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = point.values()[i];
        point.values_mut()[i] = orig + h;
        let up = loss_value(f, &point)?;
        point.values_mut()[i] = orig - h;
        let down = loss_value(f, &point)?;
        point.values_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error between two vectors with an absolute floor.
pub fn max_rel_err(a: &[f64], b: &[f64], abs_floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()).max(abs_floor)))
        .fold(0.0, f64::max)
}
