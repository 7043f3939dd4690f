//! Flat parameter enumeration shared by the optimizer and the
//! finite-difference gradient checker.

/// Uniform flat view over a trainable structure's scalar parameters.
///
/// Parameter and gradient containers of the same structure must use the same
/// index order so they can be zipped by the optimizer.
pub trait ParamVec {
    fn param_count(&self) -> usize;
    fn param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, v: f64);
    /// Human-readable name for error reporting, e.g. `layer0.weight[2,3]`.
    fn param_name(&self, i: usize) -> String;

    fn add_to_param(&mut self, i: usize, dv: f64) {
        let v = self.param(i);
        self.set_param(i, v + dv);
    }
}
