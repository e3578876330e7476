//! Cross-module invariants: fusion must vectorize exactly like the tensor
//! kernels, and the hand-written backward pass must agree with central
//! finite differences through every head at once.

use rtn_core::layers::{
    softmax, LinearLayer, Network, NetworkShape, UpstreamGrads, VariantFlags,
    NEW_LAYER_LR_MULTIPLIER,
};
use rtn_core::losses::{entropy_penalty, fuse};
use rtn_core::optim::Parameters;
use rtn_core::rng::Rng;
use rtn_core::tensor::Tensor;

fn rand_t(rng: &mut Rng, m: usize, n: usize) -> Tensor {
    Tensor::new(
        vec![m, n],
        (0..m * n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

// fuse's row-major vectorization order must match outer's flattening.
#[test]
fn fuse_ordering_matches_outer_flattening() {
    let mut rng = Rng::new(711);
    for _ in 0..10 {
        let a = rand_t(&mut rng, 4, 3);
        let b = rand_t(&mut rng, 4, 5);
        let fused = fuse(&[&a, &b]).unwrap();
        for i in 0..4 {
            let va = Tensor::vector(a.row(i).to_vec()).unwrap();
            let vb = Tensor::vector(b.row(i).to_vec()).unwrap();
            let outer = va.outer(&vb).unwrap();
            assert_eq!(fused.row(i), outer.data());
        }
    }
}

// Entropy of softmax rows stays within its analytic bounds under the same
// probability floor both modules share.
#[test]
fn entropy_of_softmax_rows_is_bounded() {
    let mut rng = Rng::new(712);
    let logits = rand_t(&mut rng, 50, 6);
    let p = softmax(&logits);
    let h = entropy_penalty(&p).unwrap();
    assert!(h >= 0.0 && h <= 6f64.ln() + 1e-12);
}

// Whole-network gradient check with all upstream heads active at once,
// through a deeper stack than the unit tests use.
#[test]
fn network_backward_agrees_with_finite_differences() {
    let mut rng = Rng::new(713);
    let shape = NetworkShape {
        input_dim: 5,
        feature_widths: vec![6, 5],
        bottleneck: 4,
        classes: 3,
    };
    let variant = VariantFlags {
        use_mmd: true,
        use_entropy: true,
        use_residual: true,
    };
    let mut net = Network::new(&shape, variant, &mut rng).unwrap();
    net.res2 = LinearLayer::glorot("res2", 3, 3, NEW_LAYER_LR_MULTIPLIER, &mut rng);
    let x = rand_t(&mut rng, 4, 5);
    let w_fs = rand_t(&mut rng, 4, 3);
    let w_ft = rand_t(&mut rng, 4, 3);
    let w_fbs = rand_t(&mut rng, 4, 3);
    let w_fbt = rand_t(&mut rng, 4, 3);
    let w_fcb = rand_t(&mut rng, 4, 4);

    let objective = |net: &Network| -> f64 {
        let out = net.forward(&x).unwrap();
        let dot = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        dot(&out.f_s, &w_fs)
            + dot(&out.f_t, &w_ft)
            + dot(&out.f_big_s, &w_fbs)
            + dot(&out.f_big_t, &w_fbt)
            + dot(&out.fcb_feats, &w_fcb)
    };

    net.forward_cached(&x).unwrap();
    net.backward(&UpstreamGrads {
        f_s: Some(w_fs.clone()),
        f_t: Some(w_ft.clone()),
        f_big_s: Some(w_fbs.clone()),
        f_big_t: Some(w_fbt.clone()),
        fcb_feats: Some(w_fcb.clone()),
    })
    .unwrap();

    let analytic: Vec<(String, Vec<f64>)> = net
        .layers()
        .iter()
        .flat_map(|l| {
            vec![
                (format!("{}.weight", l.name), l.weight_grad.data().to_vec()),
                (format!("{}.bias", l.name), l.bias_grad.data().to_vec()),
            ]
        })
        .collect();

    let mut worst: (String, f64) = (String::new(), 0.0);
    for (name, grads) in &analytic {
        for (k, &an) in grads.iter().enumerate() {
            let orig = {
                let slots = net.param_slots();
                slots.iter().find(|s| s.name == *name).unwrap().data[k]
            };
            let h = 1e-5 * orig.abs().max(1.0);
            let eval_at = |net: &mut Network, v: f64| -> f64 {
                {
                    let mut slots = net.param_slots();
                    slots.iter_mut().find(|s| s.name == *name).unwrap().data[k] = v;
                }
                objective(net)
            };
            let fp = eval_at(&mut net, orig + h);
            let fm = eval_at(&mut net, orig - h);
            eval_at(&mut net, orig);
            net.zero_grads();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            if rel > worst.1 {
                worst = (format!("{name}[{k}]"), rel);
            }
        }
    }
    assert!(worst.1 <= 1e-5, "worst {} rel err {:e}", worst.0, worst.1);
}

// Input gradient from backward also matches finite differences.
#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = Rng::new(714);
    let shape = NetworkShape {
        input_dim: 4,
        feature_widths: vec![5],
        bottleneck: 3,
        classes: 2,
    };
    let variant = VariantFlags {
        use_mmd: false,
        use_entropy: false,
        use_residual: true,
    };
    let mut net = Network::new(&shape, variant, &mut rng).unwrap();
    net.res2 = LinearLayer::glorot("res2", 2, 2, NEW_LAYER_LR_MULTIPLIER, &mut rng);
    let x = rand_t(&mut rng, 3, 4);
    let w = rand_t(&mut rng, 3, 2);

    let objective = |net: &Network, x: &Tensor| -> f64 {
        let out = net.forward(x).unwrap();
        out.f_s
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    net.forward_cached(&x).unwrap();
    let gx = net
        .backward(&UpstreamGrads {
            f_s: Some(w.clone()),
            ..Default::default()
        })
        .unwrap();

    let h = 1e-6;
    for i in 0..3 {
        for j in 0..4 {
            let mut plus = x.clone();
            let mut pd = plus.data().to_vec();
            pd[i * 4 + j] += h;
            plus = Tensor::new(vec![3, 4], pd).unwrap();
            let mut minus = x.clone();
            let mut md = minus.data().to_vec();
            md[i * 4 + j] -= h;
            minus = Tensor::new(vec![3, 4], md).unwrap();
            let fd = (objective(&net, &plus) - objective(&net, &minus)) / (2.0 * h);
            let an = gx.get(i, j);
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1.0) <= 1e-5,
                "x[{i},{j}]: {an} vs {fd}"
            );
        }
    }
}
