//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations eagerly; [`Tape::backward`] sweeps them in
//! reverse. Networks register their weights in a [`ParamSet`] and are trained
//! with [`Adam`].

mod params;
mod tape;
mod tensor;

pub mod check;

pub use params::{Adam, Linear, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::check::{central_difference, relative_error};
    use super::*;
    use rand::SeedableRng;

    /// Builds a scalar through every op so one check covers all backward rules.
    fn all_ops(tape: &mut Tape<'_>, a: ParamId, b: ParamId, w: ParamId) -> Var {
        let a = tape.param(a);
        let b = tape.param(b);
        let w = tape.param(w);
        let mm = tape.matmul(a, w); // 3x2
        let row = tape.slice_rows(b, 0, 1);
        let bias = tape.slice_cols(row, 0, 2);
        let lin = tape.add_row(mm, bias);
        let t = tape.tanh(lin);
        let s = tape.sigmoid(lin);
        let sp = tape.softplus(lin);
        let e = tape.exp(t);
        let l = tape.log(sp);
        let sq = tape.square(s);
        let ms = tape.max_scalar(lin, 0.05);
        let add = tape.add(e, l);
        let sub = tape.sub(add, sq);
        let mul = tape.mul(sub, ms);
        let den = tape.add_scalar(s, 1.0);
        let div = tape.div(mul, den);
        let sc = tape.scale(div, 0.7);
        let col = tape.sum_cols(s); // 3x1
        let mc = tape.mul_col(sc, col);
        let cc = tape.concat_cols(&[mc, t]);
        let top = tape.slice_rows(cc, 0, 2);
        let bottom = tape.slice_rows(cc, 1, 3);
        let cr = tape.concat_rows(&[top, bottom]);
        let target = tape.sigmoid(b);
        let tgt = tape.slice_rows(target, 0, 3);
        let tgt = tape.concat_cols(&[tgt, tgt]);
        let tgt = tape.slice_cols(tgt, 0, 4);
        let logits = tape.slice_rows(cr, 0, 3);
        let bce = tape.bce_with_logits(logits, tgt);
        let m1 = tape.mean(cr);
        let m2 = tape.sum(bce);
        tape.add(m1, m2)
    }

    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::randn(3, 4, &mut rng));
        let b = ps.add("b", Tensor::randn(4, 3, &mut rng));
        let w = ps.add("w", Tensor::randn(4, 2, &mut rng));

        let grads = {
            let mut tape = Tape::new(&ps);
            let out = all_ops(&mut tape, a, b, w);
            tape.backward(out)
        };
        let analytic = grads.flatten(&ps);
        let numeric = central_difference(&ps, 1e-6, |p| {
            let mut tape = Tape::new(p);
            let out = all_ops(&mut tape, a, b, w);
            tape.scalar(out)
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn gradient_wrt_constant_input() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::from_vec(2, 1, vec![2.0, -3.0]));
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::row_vector(&[1.0, 1.0]));
        let wv = tape.param(w);
        let y = tape.matmul(x, wv);
        let y = tape.sum(y);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x).unwrap().data, vec![2.0, -3.0]);
    }
}
