use super::{DiffError, Scalar, Tape, Var};

/// `x · w + b` with `w: [in, out]`, `b: [out]`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// GRU weights with gates stacked in column blocks `[reset | update | candidate]`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    /// `[in, 3D]`
    pub w_ih: Var,
    /// `[D, 3D]`
    pub w_hh: Var,
    /// `[3D]`
    pub b_ih: Var,
    /// `[3D]`
    pub b_hh: Var,
}

/// One GRU step over a batch of rows: `x: [R, in]`, `h: [R, D]` → `[R, D]`.
///
/// ```text
/// r = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell<T: Scalar>(tape: &mut Tape<T>, x: Var, h: Var, w: &GruWeights) -> Result<Var, DiffError> {
    let hidden_shape = tape.shape(h).to_vec();
    let d = *hidden_shape.last().ok_or(DiffError::Dimension { what: "gru hidden rank", expected: 2, found: 0 })?;
    let whh = tape.shape(w.w_hh).to_vec();
    if whh.len() != 2 || whh[0] != d || whh[1] != 3 * d {
        return Err(DiffError::Dimension { what: "gru w_hh rows", expected: d, found: whh[0] });
    }
    let wih = tape.shape(w.w_ih).to_vec();
    if wih.len() != 2 || wih[1] != 3 * d {
        return Err(DiffError::Dimension { what: "gru w_ih columns", expected: 3 * d, found: *wih.last().unwrap_or(&0) });
    }
    let gi = linear(tape, x, w.w_ih, w.b_ih)?;
    let gh = linear(tape, h, w.w_hh, w.b_hh)?;
    let axis = tape.shape(gi).len() - 1;
    let i_r = tape.narrow(gi, axis, 0, d)?;
    let i_z = tape.narrow(gi, axis, d, d)?;
    let i_n = tape.narrow(gi, axis, 2 * d, d)?;
    let h_r = tape.narrow(gh, axis, 0, d)?;
    let h_z = tape.narrow(gh, axis, d, d)?;
    let h_n = tape.narrow(gh, axis, 2 * d, d)?;
    let r = tape.add(i_r, h_r)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(i_z, h_z)?;
    let z = tape.sigmoid(z)?;
    let rn = tape.mul(r, h_n)?;
    let n = tape.add(i_n, rn)?;
    let n = tape.tanh(n)?;
    // h' = n + z ⊙ (h - n)
    let diff = tape.sub(h, n)?;
    let carried = tape.mul(z, diff)?;
    tape.add(n, carried)
}
