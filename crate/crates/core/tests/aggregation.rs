mod common;

use common::*;
use graphcage::aggregation::{
    aggregate, aggregation_capsules, capsnet_aggregate, gcn_step, readout, GcnParams, GraphRepresentation,
    Readout, ReadoutHead, ReadoutParams,
};
use graphcage::modality::Modality;
use graphcage::tensor::{ParamStore, Tape, Tensor};
use graphcage::trace::Stage;
use proptest::prelude::*;

/// Per-node identity capsule weights, so each capsule equals its node.
fn identity_caps_w(n: usize, d_c: usize) -> Tensor {
    let mut w = vec![0.0; n * d_c * d_c];
    for j in 0..n {
        for c in 0..d_c {
            w[(j * d_c + c) * d_c + c] = 1.0;
        }
    }
    Tensor::new(&[n, 1, d_c, d_c], w).unwrap()
}

/// Algorithm 2 with explicit loops over capsules `caps[j]`.
fn aggregation_oracle(caps: &[Vec<f64>], p: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d_c) = (caps.len(), caps[0].len());
    let mut b = vec![0.0; n];
    let mut r_out = vec![0.0; d_c];
    let mut trace = Vec::new();
    for _ in 0..p {
        let r = softmax(&b);
        for c in 0..d_c {
            r_out[c] = (0..n).map(|j| r[j] * caps[j][c]).sum();
        }
        for j in 0..n {
            b[j] += (0..d_c).map(|c| caps[j][c] * r_out[c]).sum::<f64>();
        }
        trace.push(r);
    }
    (r_out, trace)
}

fn gcn(d_c: usize, max_nodes: usize, readout: Readout, seed: u64) -> (ParamStore, GcnParams) {
    let mut store = ParamStore::new();
    let p = GcnParams::register(&mut store, d_c, max_nodes, readout, &mut rng(seed)).unwrap();
    (store, p)
}

#[test]
fn zero_adjacency_and_identity_weights_give_tanh() {
    let (mut store, p) = gcn(3, 4, Readout::Capsule, 1);
    for k in 0..2 {
        store.get_mut(p.steps[k].w).tensor = Tensor::eye(3);
        store.get_mut(p.steps[k].w_o).tensor = Tensor::eye(3);
    }
    let nodes = random(&[3, 4], &mut rng(2));
    let tape = Tape::new(&store);
    let a = tape.constant(Tensor::zeros(&[4, 4]));
    for k in [1, 2] {
        let out = gcn_step(&tape, &p, tape.constant(nodes.clone()), a, k).unwrap();
        assert_eq!(rows(&tape.value(out)), map(&rows(&nodes), f64::tanh));
    }
    assert!(gcn_step(&tape, &p, tape.constant(nodes.clone()), a, 0).is_err());
    assert!(gcn_step(&tape, &p, tape.constant(nodes), a, 3).is_err());
}

#[test]
fn gcn_step_matches_matrix_chain() {
    let (store, p) = gcn(4, 3, Readout::Capsule, 3);
    let mut r = rng(4);
    let nodes = map(&rows(&random(&[4, 3], &mut r)), |v| 3.0 * v);
    let adj = map(&rows(&random(&[3, 3], &mut r)), |v| v.abs());
    let tape = Tape::new(&store);
    for k in [1, 2] {
        let out = gcn_step(&tape, &p, tape.constant(tensor(&nodes)), tape.constant(tensor(&adj)), k).unwrap();
        let self_loop = add(&adj, &rows(&Tensor::eye(3)));
        let chain = mm(
            &param_rows(&store, p.steps[k - 1].w_o),
            &mm(&mm(&param_rows(&store, p.steps[k - 1].w), &nodes), &self_loop),
        );
        let got = rows(&tape.value(out));
        assert!(max_diff(&got, &map(&chain, f64::tanh)) < 1e-15);
        assert!(got.iter().flatten().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn single_iteration_averages_capsules() {
    let nodes = vec![vec![1.0, 4.0, -2.0, 0.5], vec![3.0, 0.0, 1.0, -1.5]];
    let store = ParamStore::new();
    let tape = Tape::new(&store);
    let w = tape.constant(identity_caps_w(4, 2));
    let (rep, trace) = capsnet_aggregate(&tape, w, tape.constant(tensor(&nodes)), 1, Modality::Text, 1).unwrap();
    // n = 4 keeps 1/n exact.
    assert_eq!(tape.value(rep.r).data(), &[0.25 * 3.5, 0.25 * 2.5]);
    assert_eq!(trace.iterations, vec![vec![0.25; 4]]);
    assert_eq!(trace.stage, Stage::Aggregation);
    assert_eq!(trace.k, Some(1));
}

#[test]
fn single_node_is_its_own_representation() {
    let store = ParamStore::new();
    let tape = Tape::new(&store);
    let w = random(&[1, 1, 3, 3], &mut rng(5));
    let node = random(&[3, 1], &mut rng(6));
    let cap = mm(&rows(&w.clone().reshape(&[3, 3]).unwrap()), &rows(&node));
    for p in 1..5 {
        let (rep, _) = capsnet_aggregate(&tape, tape.constant(w.clone()), tape.constant(node.clone()), p, Modality::Audio, 2).unwrap();
        assert_eq!(rows(&tape.value(rep.r)), cap);
    }
}

#[test]
fn two_iterations_match_hand_stepped_oracle() {
    let caps = vec![vec![1.0, 2.0], vec![-1.0, 0.0], vec![3.0, -2.0]];
    let (want, want_r) = aggregation_oracle(&caps, 2);
    // Iteration 1: R = (1, 0); logits b = (1, -1, 3).
    assert_eq!(want_r[1], softmax(&[1.0, -1.0, 3.0]));

    let store = ParamStore::new();
    let tape = Tape::new(&store);
    let nodes = tensor(&tr(&caps));
    let (rep, trace) =
        capsnet_aggregate(&tape, tape.constant(identity_caps_w(3, 2)), tape.constant(nodes), 2, Modality::Vision, 1).unwrap();
    let got = tape.value(rep.r);
    for c in 0..2 {
        assert!((got.data()[c] - want[c]).abs() < 1e-12);
    }
    for (a, b) in trace.iterations.iter().flatten().zip(want_r.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(capsnet_aggregate(&tape, tape.constant(identity_caps_w(3, 2)), tape.constant(tensor(&tr(&caps))), 0, Modality::Vision, 1).is_err());
}

#[test]
fn random_aggregation_matches_oracle() {
    let store = ParamStore::new();
    let tape = Tape::new(&store);
    let w = random(&[6, 1, 3, 3], &mut rng(7));
    let nodes = random(&[3, 5], &mut rng(8));
    let caps = rows(&aggregation_capsules(&tape, tape.constant(w.clone()), tape.constant(nodes.clone())).unwrap());
    for j in 0..5 {
        let wj = rows(&Tensor::new(&[3, 3], w.data()[j * 9..(j + 1) * 9].to_vec()).unwrap());
        let col: Mat = rows(&nodes).iter().map(|r| vec![r[j]]).collect();
        let want: Vec<f64> = mm(&wj, &col).into_iter().flatten().collect();
        assert!(caps[j].iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15));
    }
    for p in 1..=4 {
        let (want, _) = aggregation_oracle(&caps, p);
        let (rep, trace) = capsnet_aggregate(&tape, tape.constant(w.clone()), tape.constant(nodes.clone()), p, Modality::Text, 2).unwrap();
        let got = tape.value(rep.r);
        assert!(got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12), "p = {p}");
        for (norm, cap) in trace.capsule_norms.iter().zip(&caps) {
            assert!((norm - cap.iter().map(|v| v * v).sum::<f64>().sqrt()).abs() < 1e-14);
        }
        assert_eq!(trace.capsule_norms.len(), 5);
    }
}

#[test]
fn node_permutation_leaves_representation_unchanged() {
    let (store, p) = gcn(3, 5, Readout::Capsule, 9);
    let mut r = rng(10);
    let nodes = rows(&random(&[3, 5], &mut r));
    let adj = map(&rows(&random(&[5, 5], &mut r)), |v| v.max(0.0));
    let perm = [2, 4, 0, 1, 3];

    let rep = |store: &ParamStore, nodes: &Mat, adj: &Mat| -> Vec<Vec<f64>> {
        let tape = Tape::new(store);
        let mut n = tape.constant(tensor(nodes));
        let a = tape.constant(tensor(adj));
        let mut out = Vec::new();
        for k in [1, 2] {
            n = gcn_step(&tape, &p, n, a, k).unwrap();
            let (rep, _) = aggregate(&tape, &p, n, 3, Modality::Text, k).unwrap();
            out.push(tape.value(rep.r).into_data());
        }
        out
    };
    let base = rep(&store, &nodes, &adj);

    let mut permuted = store.clone();
    for k in 0..2 {
        let ReadoutParams::Capsule { caps_w } = p.steps[k].readout else { unreachable!() };
        let w = store.tensor(caps_w);
        let data = perm.iter().flat_map(|&j| w.data()[j * 9..(j + 1) * 9].iter().copied()).collect();
        permuted.get_mut(caps_w).tensor = Tensor::new(w.shape(), data).unwrap();
    }
    let pn: Mat = nodes.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
    let pa: Mat = perm.iter().map(|&i| perm.iter().map(|&j| adj[i][j]).collect()).collect();
    let moved = rep(&permuted, &pn, &pa);
    for (a, b) in base.iter().flatten().zip(moved.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ablation_readouts() {
    let nodes = random(&[3, 4], &mut rng(11));
    let nr = rows(&nodes);

    let (store, p) = gcn(3, 4, Readout::Mean, 12);
    let tape = Tape::new(&store);
    let (rep, trace) = aggregate(&tape, &p, tape.constant(nodes.clone()), 2, Modality::Audio, 1).unwrap();
    assert!(trace.is_none());
    let mean: Vec<f64> = nr.iter().map(|r| r.iter().sum::<f64>() / 4.0).collect();
    assert!(tape.value(rep.r).data().iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-15));

    let (store, p) = gcn(3, 4, Readout::Attention, 13);
    let tape = Tape::new(&store);
    let (rep, _) = aggregate(&tape, &p, tape.constant(nodes.clone()), 2, Modality::Audio, 2).unwrap();
    let ReadoutParams::Attention { w, score } = p.steps[1].readout else { unreachable!() };
    let e = mm(&param_rows(&store, score), &map(&mm(&param_rows(&store, w), &nr), f64::tanh));
    let a = softmax(&e[0]);
    let want: Vec<f64> = nr.iter().map(|r| r.iter().zip(&a).map(|(x, w)| x * w).sum()).collect();
    assert!(tape.value(rep.r).data().iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-14));

    let (store, p) = gcn(3, 4, Readout::Recurrent, 14);
    let tape = Tape::new(&store);
    let (rep, _) = aggregate(&tape, &p, tape.constant(nodes.clone()), 2, Modality::Audio, 1).unwrap();
    let ReadoutParams::Recurrent { w_x, w_h, bias } = p.steps[0].readout else { unreachable!() };
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (wx, wh, b) = (param_rows(&store, w_x), param_rows(&store, w_h), param_vec(&store, bias));
    let (mut h, mut c) = (vec![vec![0.0]; 3], vec![0.0; 3]);
    for j in 0..4 {
        let x: Mat = nr.iter().map(|r| vec![r[j]]).collect();
        let g = add(&mm(&wx, &x), &mm(&wh, &h));
        for u in 0..3 {
            let (i, f, gg, o) = (sig(g[u][0] + b[u]), sig(g[3 + u][0] + b[3 + u]), (g[6 + u][0] + b[6 + u]).tanh(), sig(g[9 + u][0] + b[9 + u]));
            c[u] = f * c[u] + i * gg;
            h[u][0] = o * c[u].tanh();
        }
    }
    let got = tape.value(rep.r);
    assert!(got.data().iter().zip(h.iter().flatten()).all(|(x, y)| (x - y).abs() < 1e-14));
}

fn reps(tape: &Tape, d_c: usize, seed: u64, zero: bool) -> Vec<GraphRepresentation> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for k in [1, 2] {
        for m in Modality::ALL {
            let v = if zero { Tensor::zeros(&[d_c, 1]) } else { random(&[d_c, 1], &mut r) };
            out.push(GraphRepresentation { modality: m, k, r: tape.constant(v) });
        }
    }
    out
}

#[test]
fn readout_head_is_two_affine_layers() {
    let mut store = ParamStore::new();
    let head = ReadoutHead::register(&mut store, 4, &mut rng(15)).unwrap();
    assert_eq!(store.tensor(head.w1).shape(), &[12, 24]);
    let tape = Tape::new(&store);
    let zero = readout(&tape, &head, &reps(&tape, 4, 0, true)).unwrap();
    assert_eq!(tape.value(zero).data(), &[0.0]);

    let mut store2 = store.clone();
    randomize(&mut store2, head.b1, 0.5, &mut rng(16));
    randomize(&mut store2, head.b2, 0.5, &mut rng(17));
    let tape = Tape::new(&store2);
    let mut rs = reps(&tape, 4, 18, false);
    // Order of the list does not matter, only (k, modality).
    rs.reverse();
    let y = readout(&tape, &head, &rs).unwrap();
    assert_eq!(tape.shape(y), vec![1, 1]);

    let mut x: Mat = Vec::new();
    for k in [1, 2] {
        for m in Modality::ALL {
            let rep = rs.iter().find(|r| r.k == k && r.modality == m).unwrap();
            x.extend(rows(&tape.value(rep.r)));
        }
    }
    let b1: Mat = param_vec(&store2, head.b1).into_iter().map(|v| vec![v]).collect();
    let h = map(&add(&mm(&param_rows(&store2, head.w1), &x), &b1), |v| v.max(0.0));
    let want = mm(&param_rows(&store2, head.w2), &h)[0][0] + param_vec(&store2, head.b2)[0];
    assert!((tape.scalar(y) - want).abs() < 1e-14);

    rs.pop();
    assert!(readout(&tape, &head, &rs).is_err());
}

#[test]
fn one_parameter_set_per_iteration() {
    let (store, p) = gcn(3, 4, Readout::Capsule, 19);
    let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
    assert_eq!(names, ["aggregate.k1.w", "aggregate.k1.w_o", "aggregate.k1.caps_w", "aggregate.k2.w", "aggregate.k2.w_o", "aggregate.k2.caps_w"]);
    assert_eq!(p.step_param_ids(1).len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn representation_is_a_convex_combination(seed in any::<u64>(), n in 1usize..7, p in 1usize..5) {
        let store = ParamStore::new();
        let tape = Tape::new(&store);
        let mut r = rng(seed);
        let w = random(&[n, 1, 3, 3], &mut r);
        let nodes = random(&[3, n], &mut r);
        let caps = rows(&aggregation_capsules(&tape, tape.constant(w.clone()), tape.constant(nodes.clone())).unwrap());
        let (rep, trace) = capsnet_aggregate(&tape, tape.constant(w), tape.constant(nodes), p, Modality::Text, 1).unwrap();
        prop_assert!(trace.max_normalization_error() < 1e-9);
        let got = tape.value(rep.r);
        for c in 0..3 {
            let lo = caps.iter().map(|cap| cap[c]).fold(f64::INFINITY, f64::min);
            let hi = caps.iter().map(|cap| cap[c]).fold(f64::NEG_INFINITY, f64::max);
            let v = got.data()[c];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
