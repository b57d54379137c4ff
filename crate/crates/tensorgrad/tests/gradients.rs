mod common;

use common::{gradcheck, randn, rng, weighted_sum};
use tensorgrad::{BatchNormMode, Graph, LayerSpec, LstmVars, Tensor};

const TOL: f64 = 1e-4;

fn check(name: &str, worst: f64) {
    assert!(worst < TOL, "{name}: relative gradient error {worst:e}");
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(1);
    let spec = LayerSpec::conv2d(2, 3);
    let inputs = [
        randn(&mut r, &[2, 2, 3, 8], 1.0),
        randn(&mut r, &[3, 2, 1, 3], 0.5),
        randn(&mut r, &[3], 0.5),
    ];
    check(
        "conv2d",
        gradcheck(&inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], &spec).unwrap();
            weighted_sum(g, y, 11)
        }),
    );
}

#[test]
fn deconv2d_gradients() {
    let mut r = rng(2);
    let spec = LayerSpec::deconv2d(3, 2);
    let inputs = [
        randn(&mut r, &[2, 3, 2, 4], 1.0),
        randn(&mut r, &[3, 2, 1, 3], 0.5),
        randn(&mut r, &[2], 0.5),
    ];
    check(
        "deconv2d",
        gradcheck(&inputs, |g, v| {
            let y = g.deconv2d(v[0], v[1], v[2], &spec).unwrap();
            weighted_sum(g, y, 12)
        }),
    );
}

#[test]
fn batchnorm_train_gradients() {
    let mut r = rng(3);
    let inputs = [
        randn(&mut r, &[2, 3, 2, 4], 1.0),
        randn(&mut r, &[3], 1.0),
        randn(&mut r, &[3], 1.0),
    ];
    check(
        "batchnorm2d(train)",
        gradcheck(&inputs, |g, v| {
            let (y, _) = g.batchnorm2d(v[0], v[1], v[2], BatchNormMode::Train).unwrap();
            weighted_sum(g, y, 13)
        }),
    );
}

#[test]
fn batchnorm_eval_gradients() {
    let mut r = rng(4);
    let inputs = [
        randn(&mut r, &[3, 2, 4], 1.0),
        randn(&mut r, &[3], 1.0),
        randn(&mut r, &[3], 1.0),
    ];
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    check(
        "batchnorm2d(eval)",
        gradcheck(&inputs, |g, v| {
            let mode = BatchNormMode::Eval { mean: &mean, var: &var };
            let (y, _) = g.batchnorm2d(v[0], v[1], v[2], mode).unwrap();
            weighted_sum(g, y, 14)
        }),
    );
}

#[test]
fn prelu_gradients() {
    let mut r = rng(5);
    // Keep inputs away from the kink at 0.
    let x = randn(&mut r, &[2, 3, 2, 3], 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let inputs = [x, randn(&mut r, &[3], 0.5)];
    check(
        "prelu",
        gradcheck(&inputs, |g, v| {
            let y = g.prelu(v[0], v[1]).unwrap();
            weighted_sum(g, y, 15)
        }),
    );
}

#[test]
fn prelu_slope_gradient_is_sum_of_negative_inputs() {
    let x = Tensor::new(&[2, 1, 3], vec![1.0, -2.0, 0.5, -0.25, 3.0, -1.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let s = g.param(Tensor::new(&[2], vec![0.25, 0.1]).unwrap());
    let y = g.prelu(xv, s).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(s).unwrap().data(), &[-2.0, -1.25]);
}

#[test]
fn layernorm_gradients() {
    let mut r = rng(6);
    let inputs = [
        randn(&mut r, &[4, 5], 1.0),
        randn(&mut r, &[5], 1.0),
        randn(&mut r, &[5], 1.0),
    ];
    check(
        "layernorm",
        gradcheck(&inputs, |g, v| {
            let y = g.layernorm(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, 16)
        }),
    );
}

#[test]
fn linear_gradients() {
    let mut r = rng(7);
    let inputs = [
        randn(&mut r, &[2, 3, 4], 1.0),
        randn(&mut r, &[5, 4], 1.0),
        randn(&mut r, &[5], 1.0),
    ];
    check(
        "linear",
        gradcheck(&inputs, |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, 17)
        }),
    );
}

#[test]
fn lstm_single_direction_gradients() {
    // T = 3, D_in = 2, hidden = 2.
    let mut r = rng(8);
    let inputs = [
        randn(&mut r, &[3, 2], 1.0),
        randn(&mut r, &[8, 2], 0.7),
        randn(&mut r, &[8, 2], 0.7),
        randn(&mut r, &[8], 0.5),
    ];
    for reverse in [false, true] {
        check(
            "lstm",
            gradcheck(&inputs, |g, v| {
                let p = LstmVars { w_ih: v[1], w_hh: v[2], bias: v[3] };
                let y = g.lstm_layer(v[0], p, reverse).unwrap();
                weighted_sum(g, y, 18)
            }),
        );
    }
}

#[test]
fn stacked_bidirectional_lstm_gradients() {
    let mut r = rng(9);
    let (d, h) = (3, 2);
    let mut inputs = vec![randn(&mut r, &[2, 4, d], 1.0)];
    for layer in 0..2 {
        let din = if layer == 0 { d } else { 2 * h };
        for _ in 0..2 {
            inputs.push(randn(&mut r, &[4 * h, din], 0.6));
            inputs.push(randn(&mut r, &[4 * h, h], 0.6));
            inputs.push(randn(&mut r, &[4 * h], 0.3));
        }
    }
    check(
        "bilstm",
        gradcheck(&inputs, |g, v| {
            let dir = |i: usize| LstmVars { w_ih: v[1 + 3 * i], w_hh: v[2 + 3 * i], bias: v[3 + 3 * i] };
            let layers = vec![vec![dir(0), dir(1)], vec![dir(2), dir(3)]];
            let y = g.lstm_seq(v[0], &layers).unwrap();
            weighted_sum(g, y, 19)
        }),
    );
}

#[test]
fn elementwise_and_shape_gradients() {
    let mut r = rng(10);
    let inputs = [randn(&mut r, &[2, 3, 4], 1.0), randn(&mut r, &[2, 3, 4], 1.0)];
    check(
        "elementwise",
        gradcheck(&inputs, |g, v| {
            let a = g.mul(v[0], v[1]).unwrap();
            let b = g.sub(a, v[1]).unwrap();
            let c = g.add(b, v[0]).unwrap();
            let c = g.square(c);
            let c = g.scale(c, 0.3);
            let c = g.add_scalar(c, -0.2);
            let c = g.tanh(c);
            let c = g.sigmoid(c);
            let p = g.permute(c, &[2, 0, 1]).unwrap();
            let s = g.slice(p, 0, 1, 2).unwrap();
            let q = g.reshape(v[0], &[4, 2, 3]).unwrap();
            let q = g.slice(q, 0, 0, 2).unwrap();
            let cat = g.concat(&[s, q], 1).unwrap();
            let red = g.sum_axis(cat, 1).unwrap();
            weighted_sum(g, red, 20)
        }),
    );
}

#[test]
fn relu_and_mean_gradients() {
    let x = Tensor::new(&[4], vec![-1.0, 2.0, -0.5, 3.0]).unwrap();
    check(
        "relu/mean",
        gradcheck(&[x], |g, v| {
            let y = g.relu(v[0]);
            let y = g.square(y);
            g.mean(y)
        }),
    );
}

#[test]
fn complex_op_gradients() {
    let mut r = rng(11);
    // Magnitudes stay above 1e-3 where compression is differentiable.
    let a = randn(&mut r, &[2, 3, 4], 1.0).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    let b = randn(&mut r, &[2, 3, 4], 1.0);
    check(
        "complex",
        gradcheck(&[a, b], |g, v| {
            let m = g.complex_mul(v[0], v[1]).unwrap();
            let c = g.complex_compress(v[0], 1e-8).unwrap();
            let s = g.add(m, c).unwrap();
            let mag = g.complex_abs(v[0]).unwrap();
            let l1 = weighted_sum(g, s, 21);
            let l2 = weighted_sum(g, mag, 22);
            g.add(l1, l2).unwrap()
        }),
    );
}
