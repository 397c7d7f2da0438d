use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, TcinnModel};
use crate::tensor::{Real, Tensor};

/// Tape handles of the bidirectional loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub forward: Var,
    pub inverse: Var,
}

/// Scalar loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub forward: f64,
    pub inverse: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// `lambda * mse(f(x), y) + mse(f^-1(y), x)` on the tape.
pub fn loss_hold_graph<T: Real>(
    tape: &mut Tape<T>,
    model: &TcinnModel<T>,
    bound: &BoundModel,
    x: Var,
    y: Var,
    lambda: f64,
) -> Result<LossVars> {
    check_lambda(lambda)?;
    if tape.value(x).shape() != tape.value(y).shape() {
        return Err(Error::shape(
            "loss_hold",
            format!("source {:?} vs target {:?}", tape.value(x).shape(), tape.value(y).shape()),
        ));
    }
    let fx = model.forward_graph(tape, bound, x)?;
    let forward = tape.mse(fx, y)?;
    let gy = model.inverse_graph(tape, bound, y)?;
    let inverse = tape.mse(gy, x)?;
    let weighted = tape.scale(forward, lambda);
    let total = tape.add(weighted, inverse)?;
    Ok(LossVars {
        total,
        forward,
        inverse,
    })
}

pub(crate) fn read_loss<T: Real>(tape: &Tape<T>, vars: &LossVars) -> LossValue {
    LossValue {
        total: tape.value(vars.total).data()[0].as_f64(),
        forward: tape.value(vars.forward).data()[0].as_f64(),
        inverse: tape.value(vars.inverse).data()[0].as_f64(),
    }
}

/// Evaluates the bidirectional loss without recording gradients.
pub fn loss_hold<T: Real>(x: &Tensor<T>, y: &Tensor<T>, model: &TcinnModel<T>, lambda: f64) -> Result<LossValue> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let vars = loss_hold_graph(&mut tape, model, &bound, xv, yv, lambda)?;
    Ok(read_loss(&tape, &vars))
}
