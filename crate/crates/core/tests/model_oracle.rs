//! Straight-line re-implementation of generation and the loss terms with
//! plain loops, compared against the tape model on the tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnp::model::{bind_constant, forward, Model, ModelConfig};
use rnp::nets::{Linear, HIDDEN};
use rnp::stn::LevelGeometry;
use rnp::{Tape, Tensor};

const TOL: f64 = 1e-10;

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `x·W + b` with `W` stored `[in, out]`.
fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    assert_eq!(w.len(), x.len() * out);
    (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>()).collect()
}

struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
}

struct Nets {
    enc: Vec<Layer>,
    state: (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
    policy: (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
    dec: Vec<Layer>,
    act: Vec<Layer>,
    x0: Vec<f64>,
    a0: Vec<f64>,
}

fn mlp(layers: &[Layer], x: &[f64], last: fn(f64) -> f64) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        let f = if i + 1 == layers.len() { last } else { elu };
        h = dense(&h, &l.w, &l.b).into_iter().map(f).collect();
    }
    h
}

fn rnn(w: &(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), h: &[f64], x: &[f64]) -> Vec<f64> {
    let zero = vec![0.0; h.len()];
    let a = dense(h, &w.0, &zero);
    let b = dense(x, &w.1, &w.2);
    a.iter().zip(&b).map(|(p, q)| (p + q).tanh()).collect()
}

fn vals(t: &Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}

/// Generates per-program networks by walking each head in the documented
/// order: encoder, state, policy, patch decoder, action decoder, x0, a0.
fn hypernet(model: &Model<Tensor<f64>>, z: &[f64], p: usize) -> Nets {
    let hw = &model.hyper;
    let mut h = z.to_vec();
    for l in &hw.trunk.layers {
        h = dense(&h, &vals(&l.weight), &vals(&l.bias)).into_iter().map(elu).collect();
    }
    let heads: Vec<Vec<f64>> = hw.heads.iter().map(|l: &Linear<Tensor<f64>>| dense(&h, &vals(&l.weight), &vals(&l.bias))).collect();
    let zd = z.len();
    let take = |head: &[f64], at: &mut usize, n: usize| {
        let v = head[*at..*at + n].to_vec();
        *at += n;
        v
    };
    let mlp_of = |head: &[f64], dims: [usize; 4]| {
        let mut at = 0;
        let layers = (0..3)
            .map(|i| {
                let w = take(head, &mut at, dims[i] * dims[i + 1]);
                Layer { w, b: take(head, &mut at, dims[i + 1]) }
            })
            .collect::<Vec<_>>();
        assert_eq!(at, head.len());
        layers
    };
    let rnn_of = |head: &[f64]| {
        let mut at = 0;
        let r = (take(head, &mut at, zd * zd), take(head, &mut at, zd * zd), take(head, &mut at, zd), take(head, &mut at, zd));
        assert_eq!(at, head.len());
        r
    };
    Nets {
        enc: mlp_of(&heads[0], [p + 6, HIDDEN, HIDDEN, zd]),
        state: rnn_of(&heads[1]),
        policy: rnn_of(&heads[2]),
        dec: mlp_of(&heads[3], [zd, HIDDEN, HIDDEN, p]),
        act: mlp_of(&heads[4], [zd, HIDDEN, HIDDEN, 6]),
        x0: heads[5].clone(),
        a0: heads[6].clone(),
    }
}

fn squash(r: &[f64], g: &LevelGeometry) -> [f64; 6] {
    let s = |v: f64| g.scale_min + (g.scale_max - g.scale_min) * sigmoid(v);
    [s(r[0]), s(r[1]), r[2].tanh(), r[3].tanh(), g.theta_max * r[4].tanh(), g.shear_max * r[5].tanh()]
}

/// `[[a, b, tx], [c, d, ty]]` for `R(θ)·Sh(m)·diag(sx, sy)`.
fn affine(a: &[f64; 6]) -> [f64; 6] {
    let [sx, sy, tx, ty, th, m] = *a;
    // Sh(m)·diag = [[sx, m·sy], [0, sy]], then rotate.
    let (s, c) = th.sin_cos();
    [c * sx, c * m * sy - s * sy, tx, s * sx, s * m * sy + c * sy, ty]
}

fn sample(img: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let u = ((x + 1.0) * n as f64 - 1.0) / 2.0;
    let v = ((y + 1.0) * n as f64 - 1.0) / 2.0;
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let px = |c: f64, r: f64| {
        if c < 0.0 || r < 0.0 || c >= n as f64 || r >= n as f64 {
            0.0
        } else {
            img[r as usize * n + c as usize]
        }
    };
    (1.0 - fv) * ((1.0 - fu) * px(u0, v0) + fu * px(u0 + 1.0, v0)) + fv * ((1.0 - fu) * px(u0, v0 + 1.0) + fu * px(u0 + 1.0, v0 + 1.0))
}

fn centre(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

fn warp(patch: &[f64], p: usize, a: &[f64; 6], s: usize) -> Vec<f64> {
    let [m11, m12, tx, m21, m22, ty] = affine(a);
    let det = m11 * m22 - m12 * m21;
    let mut out = vec![0.0; s * s];
    for r in 0..s {
        for c in 0..s {
            let (qx, qy) = (centre(c, s) - tx, centre(r, s) - ty);
            let x = (m22 * qx - m12 * qy) / det;
            let y = (-m21 * qx + m11 * qy) / det;
            out[r * s + c] = sample(patch, p, x, y);
        }
    }
    out
}

fn extract(img: &[f64], s: usize, a: &[f64; 6], p: usize) -> Vec<f64> {
    let [m11, m12, tx, m21, m22, ty] = affine(a);
    let mut out = vec![0.0; p * p];
    for r in 0..p {
        for c in 0..p {
            let (u, v) = (centre(c, p), centre(r, p));
            out[r * p + c] = sample(img, s, m11 * u + m12 * v + tx, m21 * u + m22 * v + ty);
        }
    }
    out
}

struct Unrolled {
    canvas: Vec<f64>,
    patches: Vec<Vec<f64>>,
    actions: Vec<[f64; 6]>,
}

fn unroll(model: &Model<Tensor<f64>>, z: &[f64], levels: &[LevelGeometry], steps: &[usize], path: &mut Vec<usize>, order: &mut Vec<Vec<usize>>) -> Unrolled {
    let g = &levels[0];
    let p = g.patch_size;
    let nets = hypernet(model, z, p * p);
    let (mut hs, mut hp) = (nets.state.3.clone(), nets.policy.3.clone());
    let (mut feedback, mut raw) = (nets.x0.clone(), nets.a0.clone());
    let mut canvas = vec![0.0; g.canvas_size * g.canvas_size];
    let mut out = Unrolled { canvas: vec![], patches: vec![], actions: vec![] };
    for t in 0..steps[0] {
        let prev = squash(&raw, g);
        let input: Vec<f64> = feedback.iter().chain(prev.iter()).copied().collect();
        let e = mlp(&nets.enc, &input, |v| v);
        hs = rnn(&nets.state, &hs, &e);
        hp = rnn(&nets.policy, &hp, &e);
        raw = mlp(&nets.act, &hp, |v| v);
        let action = squash(&raw, g);
        let decoded = mlp(&nets.dec, &hs, sigmoid);
        path.push(t);
        let placed = if levels.len() > 1 { unroll(model, &hs, &levels[1..], &steps[1..], path, order).canvas } else { decoded.clone() };
        order.push(path.clone());
        path.pop();
        for (c, w) in canvas.iter_mut().zip(warp(&placed, p, &action, g.canvas_size)) {
            *c += w;
        }
        feedback = placed;
        out.patches.push(decoded);
        out.actions.push(action);
    }
    out.canvas = canvas;
    out
}

fn close(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len(), "{what} length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= TOL * (1.0 + y.abs()), "{what}[{i}]: tape {x} vs oracle {y}");
    }
}

fn tape_vs_oracle(seed: u64) {
    let cfg = ModelConfig { seed, ..ModelConfig::tiny() };
    let model = Model::<Tensor<f64>>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let s = cfg.image_size();
    let b = 2;
    let x = Tensor::new([b, s, s], (0..b * s * s).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let noise = Tensor::new([b, cfg.z_dim], (0..b * cfg.z_dim).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();

    let mut tape = Tape::<f64>::new();
    let m = bind_constant(&mut tape, &model);
    let xv = tape.constant(x.clone());
    let f = forward(&mut tape, &m, xv, Some(noise.clone()), &cfg).unwrap();

    let mut total = 0.0;
    for i in 0..b {
        let tree = f.tree.sample(&tape, i);
        let mu = vals(tree.mu.as_ref().unwrap());
        let lv = vals(tree.logvar.as_ref().unwrap());
        let z: Vec<f64> = (0..cfg.z_dim).map(|k| mu[k] + (lv[k] / 2.0).exp() * noise.data()[i * cfg.z_dim + k]).collect();
        close(&vals(&tree.z), &z, "z");

        let mut order = vec![];
        let o = unroll(&model, &z, &cfg.levels, &cfg.steps, &mut vec![], &mut order);
        close(&vals(tree.image()), &o.canvas, "canvas");
        for t in 0..o.patches.len() {
            close(&vals(&tree.root.patches[t]), &o.patches[t], "patch");
            close(&vals(&tree.root.actions[t]), &o.actions[t], "action");
        }
        assert_eq!(tree.order, order);

        let xi = &x.data()[i * s * s..(i + 1) * s * s];
        let recon: f64 = o.canvas.iter().zip(xi).map(|(c, v)| (c - v).powi(2)).sum();
        let p = cfg.patch_size();
        let part_reg = o
            .patches
            .iter()
            .zip(&o.actions)
            .map(|(d, a)| d.iter().zip(extract(xi, s, a, p)).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
            .sum::<f64>()
            / o.patches.len() as f64;
        let kl = -0.5 * mu.iter().zip(&lv).map(|(m, l)| 1.0 + l - m * m - l.exp()).sum::<f64>();
        close(&[tape.value(f.terms.recon).data()[i]], &[recon], "recon");
        close(&[tape.value(f.terms.part_reg).data()[i]], &[part_reg], "part_reg");
        close(&[tape.value(f.terms.kl).data()[i]], &[kl], "kl");
        total += recon + part_reg + cfg.beta * kl;
    }
    close(&[tape.value(f.total).item()], &[total / b as f64], "total");
}

#[test]
fn tiny_model_matches_straight_line_oracle() {
    tape_vs_oracle(0);
    tape_vs_oracle(7);
}
