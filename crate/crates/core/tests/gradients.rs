//! Reverse-mode gradients against central finite differences in f64.

use dider_core::numeric::{Activation, GruCell, LstmCell, Mlp, ParamStore, Rng, Tape, Tensor, Var};
use dider_core::segmenter::{DurationHead, DurationVariant};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// Checks `d sum(w * f(inputs)) / d inputs` for a fixed random `w`.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut rng = Rng::new(99);
    let loss = |inputs: &[Tensor<f64>], rng_w: &mut Option<Tensor<f64>>, rng: &mut Rng| {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &leaves);
        let shape = tape.value(out).shape().to_vec();
        let w = rng_w.get_or_insert_with(|| random(rng, &shape, -1.0, 1.0)).clone();
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv).unwrap();
        let total = tape.sum_all(prod);
        (tape, leaves, total)
    };
    let mut w = None;
    let (tape, leaves, total) = loss(&inputs, &mut w, &mut rng);
    let grads = tape.backward(total).unwrap();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[li].numel()]);
        for k in 0..inputs[li].numel() {
            let mut plus = inputs.clone();
            plus[li].data_mut()[k] += H;
            let mut minus = inputs.clone();
            minus[li].data_mut()[k] -= H;
            let (tp, _, up) = loss(&plus, &mut w, &mut rng);
            let (tm, _, down) = loss(&minus, &mut w, &mut rng);
            let numeric = (tp.value(up).item() - tm.value(down).item()) / (2.0 * H);
            let err = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1.0);
            assert!(err < TOL, "input {li}[{k}]: analytic {} numeric {numeric}", analytic[k]);
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = Rng::new(1);
    let a = random(&mut rng, &[3, 4], -2.0, 2.0);
    let b = random(&mut rng, &[3, 4], -2.0, 2.0);
    let pos = random(&mut rng, &[3, 4], 0.2, 3.0);
    check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
    check(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check(vec![a.clone()], |t, v| t.tanh(v[0]).unwrap());
    check(vec![a.clone()], |t, v| t.sigmoid(v[0]).unwrap());
    check(vec![a.clone()], |t, v| t.exp(v[0]).unwrap());
    check(vec![pos], |t, v| t.log(v[0]).unwrap());
    check(vec![a.clone()], |t, v| t.elu(v[0]).unwrap());
    check(vec![a.clone()], |t, v| t.square(v[0]).unwrap());
    check(vec![a.clone()], |t, v| t.affine(v[0], -1.5, 0.25));
    check(vec![a], |t, v| t.softmax(v[0], 1).unwrap());
}

#[test]
fn kinked_ops_away_from_zero() {
    let mut rng = Rng::new(2);
    let mut a = random(&mut rng, &[2, 5], 0.1, 2.0);
    for (k, x) in a.data_mut().iter_mut().enumerate() {
        if k % 2 == 0 {
            *x = -*x;
        }
    }
    check(vec![a.clone()], |t, v| t.abs(v[0]).unwrap());
    check(vec![a], |t, v| t.relu(v[0]).unwrap());
}

#[test]
fn structural_ops() {
    let mut rng = Rng::new(3);
    let a = random(&mut rng, &[4, 3], -1.0, 1.0);
    let b = random(&mut rng, &[3, 5], -1.0, 1.0);
    let bias = random(&mut rng, &[3], -1.0, 1.0);
    let col = random(&mut rng, &[4, 1], -1.0, 1.0);
    check(vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]).unwrap());
    check(vec![a.clone(), bias], |t, v| t.add_bias(v[0], v[1]).unwrap());
    check(vec![a.clone(), col.clone()], |t, v| t.mul_col(v[0], v[1]).unwrap());
    check(vec![a.clone(), col], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
    check(vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 2).unwrap());
    check(vec![a.clone()], |t, v| t.slice_rows(v[0], 1, 2).unwrap());
    check(vec![a.clone(), a.clone()], |t, v| t.stack_rows(&[v[0], v[1]]).unwrap());
    check(vec![a.clone()], |t, v| t.gather_rows(v[0], &[3, 0, 0, 2]).unwrap());
    check(vec![a.clone()], |t, v| t.scatter_add_rows(v[0], &[1, 1, 0, 2], 3).unwrap());
    let src = random(&mut rng, &[2, 3], -1.0, 1.0);
    check(vec![a.clone(), src], |t, v| t.replace_rows(v[0], &[2, 0], v[1]).unwrap());
    check(vec![a.clone()], |t, v| t.sum_cols(v[0]));
    check(vec![a], |t, v| t.sum_all(v[0]));
}

/// Gradients of a parameter store through `f`, against differences.
fn check_params(mut store: ParamStore<f64>, f: impl Fn(&mut Tape<f64>, &dider_core::numeric::Bound) -> Var) {
    let eval = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = f(&mut tape, &p);
        let s = tape.sum_all(out);
        tape.value(s).item()
    };
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let out = f(&mut tape, &p);
    let s = tape.sum_all(out);
    let grads = tape.backward(s).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = grads.get(p.var(id)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + H;
            let up = eval(&store);
            store.get_mut(id).data_mut()[k] = orig - H;
            let down = eval(&store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let err = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1.0);
            assert!(err < TOL, "{}[{k}]: analytic {} numeric {numeric}", store.name(id), analytic[k]);
        }
    }
}

#[test]
fn recurrent_cells_over_three_steps() {
    let mut rng = Rng::new(4);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[2, 3], -1.0, 1.0)).collect();

    let mut store = ParamStore::new();
    let lstm = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng);
    let inputs = xs.clone();
    check_params(store, move |tape, p| {
        let mut st = lstm.zero_state(tape, 2);
        for x in &inputs {
            let xv = tape.constant(x.clone());
            st = lstm.step(tape, p, xv, st).unwrap();
        }
        tape.mul(st.h, st.c).unwrap()
    });

    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
    check_params(store, move |tape, p| {
        let mut h = tape.constant(Tensor::zeros([2, 4]));
        for x in &xs {
            let xv = tape.constant(x.clone());
            h = gru.step(tape, p, xv, h).unwrap();
        }
        tape.square(h).unwrap()
    });
}

#[test]
fn mlp_and_duration_head() {
    let mut rng = Rng::new(5);
    let x = random(&mut rng, &[3, 4], -1.0, 1.0);

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[4, 6, 2], Activation::Tanh, true, &mut rng);
    let xi = x.clone();
    check_params(store, move |tape, p| {
        let xv = tape.constant(xi.clone());
        mlp.forward(tape, p, xv).unwrap()
    });

    let mut store = ParamStore::new();
    let head = DurationHead::new(&mut store, 4, DurationVariant::PastOnly, &mut rng);
    check_params(store, move |tape, p| {
        let xv = tape.constant(x.clone());
        let (mu, sigma) = head.duration_posterior(tape, p, xv).unwrap();
        tape.concat_cols(&[mu, sigma]).unwrap()
    });
}
