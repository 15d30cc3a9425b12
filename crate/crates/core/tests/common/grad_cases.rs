use intraclass::arch::{mnist_arch_text, parse, Bound, Network, ShapeBindings};
use intraclass::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, random_tensor, rng, GradReport};

pub type Cases = Vec<(&'static str, GradReport)>;

/// `Σ out ⊙ w` for a fixed random `w`, turning any output into a scalar.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let w = random_tensor(&mut rng(seed), tape.shape(v), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

pub fn conv2d_single_and_batched() -> Cases {
    let mut out = Vec::new();
    let mut g = rng(1);
    let x = random_tensor(&mut g, &[2, 5, 6], 1.0);
    let k = random_tensor(&mut g, &[3, 2, 3, 3], 1.0);
    let b = random_tensor(&mut g, &[3], 1.0);
    for pad in [0, 1] {
        let r = gradcheck(&[x.clone(), k.clone(), b.clone()], None, 0, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], pad).unwrap();
            project(t, y, 7)
        });
        out.push(("conv2d", r));
    }
    let xb = random_tensor(&mut g, &[3, 2, 4, 4], 1.0);
    let r = gradcheck(&[xb, k, b], None, 0, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1).unwrap();
        project(t, y, 8)
    });
    out.push(("conv2d batched", r));
    out
}

pub fn maxpool_routes_to_argmax() -> Cases {
    let mut out = Vec::new();
    let x = random_tensor(&mut rng(2), &[2, 2, 4, 6], 1.0);
    let r = gradcheck(&[x], None, 0, |t, v| {
        let y = t.maxpool2(v[0]).unwrap();
        project(t, y, 3)
    });
    out.push(("maxpool", r));
    out
}

pub fn dense_flat_and_batched() -> Cases {
    let mut out = Vec::new();
    let mut g = rng(3);
    let w = random_tensor(&mut g, &[4, 6], 1.0);
    let b = random_tensor(&mut g, &[4], 1.0);
    let x = random_tensor(&mut g, &[6], 1.0);
    let r = gradcheck(&[x, w.clone(), b.clone()], None, 0, |t, v| {
        let y = t.dense(v[0], v[1], v[2]).unwrap();
        project(t, y, 4)
    });
    out.push(("dense", r));
    let xb = random_tensor(&mut g, &[3, 1, 2, 3], 1.0);
    let r = gradcheck(&[xb, w, b], None, 0, |t, v| {
        let y = t.dense(v[0], v[1], v[2]).unwrap();
        project(t, y, 5)
    });
    out.push(("dense batched", r));
    out
}

pub fn relu_and_dropout() -> Cases {
    let mut out = Vec::new();
    let x = random_tensor(&mut rng(4), &[3, 7], 1.0);
    let r = gradcheck(std::slice::from_ref(&x), None, 0, |t, v| {
        let y = t.relu(v[0]).unwrap();
        project(t, y, 6)
    });
    out.push(("relu", r));
    let r = gradcheck(&[x], None, 0, |t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(11);
        let y = t.dropout(v[0], 0.5, true, &mut mask_rng).unwrap();
        project(t, y, 6)
    });
    out.push(("dropout", r));
    out
}

pub fn softmax_and_normalize() -> Cases {
    let mut out = Vec::new();
    let x = random_tensor(&mut rng(5), &[3, 5], 2.0);
    let r = gradcheck(std::slice::from_ref(&x), None, 0, |t, v| {
        let y = t.softmax(v[0]).unwrap();
        project(t, y, 9)
    });
    out.push(("softmax", r));
    let r = gradcheck(&[x], None, 0, |t, v| {
        let y = t.l2_normalize(v[0]).unwrap();
        project(t, y, 10)
    });
    out.push(("l2_normalize", r));
    out
}

pub fn elementwise_ops() -> Cases {
    let mut out = Vec::new();
    let mut g = rng(6);
    let a = random_tensor(&mut g, &[2, 3], 1.0);
    let b = random_tensor(&mut g, &[2, 3], 1.0);
    let r = gradcheck(&[a, b], None, 0, |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let m = t.mul(d, v[1]).unwrap();
        let k = t.scale(m, 0.7).unwrap();
        let r = t.reshape(k, [3, 2]).unwrap();
        let p = project(t, r, 12);
        let q = t.mean(v[0]).unwrap();
        t.add(p, q).unwrap()
    });
    out.push(("elementwise", r));
    out
}

pub fn classifier_losses() -> Cases {
    let mut out = Vec::new();
    let mut g = rng(7);
    let s = random_tensor(&mut g, &[4, 5], 2.0);
    let labels = [0, 3, 4, 3];
    let r = gradcheck(std::slice::from_ref(&s), None, 0, |t, v| {
        t.softmax_cross_entropy(v[0], &labels).unwrap()
    });
    out.push(("softmax cross-entropy", r));
    let r = gradcheck(&[s], None, 0, |t, v| {
        let p = t.softmax(v[0]).unwrap();
        t.shannon_info_loss(p, &labels).unwrap()
    });
    out.push(("shannon info", r));
    out
}

pub fn intra_class_variance_wrt_embeddings_and_bank() -> Cases {
    let mut out = Vec::new();
    let mut g = rng(8);
    let x = random_tensor(&mut g, &[6, 3], 1.0);
    let c = random_tensor(&mut g, &[3, 4], 1.0);
    let labels = [0, 1, 1, 3, 0, 2];
    let r = gradcheck(&[x.clone(), c.clone()], None, 0, |t, v| {
        let centers = t.hadamard_centers(v[1]).unwrap();
        t.intra_class_variance_loss(v[0], centers, &labels).unwrap()
    });
    out.push(("intra-class variance", r));
    let s = random_tensor(&mut g, &[6, 4], 1.0);
    let r = gradcheck(&[s, x, c], None, 0, |t, v| {
        let centers = t.hadamard_centers(v[2]).unwrap();
        t.combined_loss(v[0], v[1], Some(centers), &labels, 0.3)
            .unwrap()
            .0
    });
    out.push(("combined loss", r));
    out
}

fn network_check(
    text: &str,
    bindings: ShapeBindings,
    image: &[usize],
    per_input: Option<usize>,
) -> GradReport {
    let graph = parse(text).unwrap();
    let net = Network::<f64>::build(&graph, bindings, 3).unwrap();
    let mut g = rng(9);
    let mut inputs: Vec<Tensor<f64>> = net.params().to_vec();
    // nonzero centers so the bank gradient is not degenerate
    inputs.push(random_tensor(
        &mut g,
        net.bank().unwrap().tensor().shape(),
        0.5,
    ));
    let mut shape = vec![2];
    shape.extend_from_slice(image);
    inputs.push(random_tensor(&mut g, &shape, 1.0).map_abs());
    let p = net.params().len();
    let labels = [1, 2];
    gradcheck(&inputs, per_input, 4, |t, v| {
        let bound = Bound {
            params: v[..p].to_vec(),
            bank: Some(v[p]),
        };
        let mut drop_rng = ChaCha8Rng::seed_from_u64(21);
        let out = net
            .forward(t, &bound, v[p + 1], true, &mut drop_rng)
            .unwrap();
        t.combined_loss(out.scores, out.embedding, out.centers, &labels, 0.5)
            .unwrap()
            .0
    })
}

trait MapAbs {
    fn map_abs(self) -> Self;
}

impl MapAbs for Tensor<f64> {
    fn map_abs(mut self) -> Self {
        for v in self.data_mut() {
            *v = v.abs();
        }
        self
    }
}

pub fn small_network_end_to_end() -> Cases {
    let mut out = Vec::new();
    for normalize in [false, true] {
        let norm = if normalize { "norm ->norm;" } else { "<-x;" };
        let text = format!(
            "in:yx:image(8); conv:3x3::r; conv:3x4:p:r; pool:2:m; drop:50; dense:n::r ->x; {norm} dense:3 ->scores; centers(C) ->centers;"
        );
        let r = network_check(&text, ShapeBindings::new(4, 3), &[1, 8, 8], None);
        out.push(("small network", r));
    }
    out
}

pub fn mnist_network_sampled() -> Cases {
    let mut out = Vec::new();
    let r = network_check(
        &mnist_arch_text(false),
        ShapeBindings::new(2, 10).with_input(28),
        &[1, 28, 28],
        Some(12),
    );
    out.push(("mnist network", r));
    out
}

/// Every case, in order.
pub fn all() -> Cases {
    [
        conv2d_single_and_batched(),
        maxpool_routes_to_argmax(),
        dense_flat_and_batched(),
        relu_and_dropout(),
        softmax_and_normalize(),
        elementwise_ops(),
        classifier_losses(),
        intra_class_variance_wrt_embeddings_and_bank(),
        small_network_end_to_end(),
        mnist_network_sampled(),
    ]
    .concat()
}
