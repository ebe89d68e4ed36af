//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it is an
//! independent oracle for the tape's reverse pass.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Finite-difference step.
    pub h: f64,
    /// Lower bound on the relative-error denominator, so elements whose
    /// true gradient is zero are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { h: 1e-5, floor: 1e-8 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(label, element, analytic, numeric)` of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((label.to_string(), index, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error && other.worst.is_some() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

impl GradCheck {
    /// Checks `∂f/∂inputs` for a scalar function of plain tensors.
    pub fn inputs<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut scratch = ParamStore::new();
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss, &mut scratch)?;

        let eval = |values: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone(), false)).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        };

        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (k, &v) in vars.iter().enumerate() {
            let zeros = vec![0.0; inputs[k].len()];
            let analytic = grads.wrt(v).unwrap_or(&zeros).to_vec();
            for i in 0..inputs[k].len() {
                let orig = work[k].data()[i];
                work[k].data_mut()[i] = orig + self.h;
                let up = eval(&work)?;
                work[k].data_mut()[i] = orig - self.h;
                let down = eval(&work)?;
                work[k].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * self.h);
                report.record(&format!("input{k}"), i, analytic[i], numeric, self.floor);
            }
        }
        Ok(report)
    }

    /// Checks the gradient of a scalar loss with respect to selected
    /// parameters. `elements` limits how many entries of each parameter are
    /// probed (evenly strided); `None` probes all of them.
    pub fn params<F>(
        &self,
        store: &mut ParamStore,
        ids: &[ParamId],
        elements: Option<usize>,
        f: F,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        store.zero_grad();
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.backward(loss, store)?;
        drop(tape);

        let eval = |store: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let out = f(&mut tape, store)?;
            Ok(tape.value(out).item())
        };

        let mut report = GradCheckReport::default();
        for &id in ids {
            let n = store.value(id).len();
            let analytic = store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; n]);
            let stride = elements.map(|e| (n / e.max(1)).max(1)).unwrap_or(1);
            let name = store.get(id).name.clone();
            for i in (0..n).step_by(stride) {
                let orig = store.value(id).data()[i];
                store.get_mut(id).value_mut().data_mut()[i] = orig + self.h;
                let up = eval(store)?;
                store.get_mut(id).value_mut().data_mut()[i] = orig - self.h;
                let down = eval(store)?;
                store.get_mut(id).value_mut().data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * self.h);
                report.record(&name, i, analytic[i], numeric, self.floor);
            }
        }
        store.zero_grad();
        Ok(report)
    }
}
