use proptest::prelude::*;
use rand::Rng;
use simst_core::gradcheck::{finite_difference_check, FdConfig};
use simst_core::rng::{stream, substream, Stream, StreamRng};
use simst_core::{ParamStore, Result, Tape, Tensor, Var};

const TOL: f64 = 1e-6;

fn random(rng: &mut StreamRng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if away_from_zero {
                let m: f64 = rng.gen_range(0.1..2.0);
                if rng.gen() {
                    m
                } else {
                    -m
                }
            } else {
                rng.gen_range(-2.0..2.0)
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Max relative error of `build` under a random linear read-out.
fn check<F>(seed: u64, shapes: &[&[usize]], away_from_zero: bool, mut build: F) -> f64
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = stream(seed, Stream::Probe);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(&format!("p{i}"), random(&mut rng, s, away_from_zero)))
        .collect();
    let mut probe = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|id| probe.param(&store, *id)).collect();
    let out = build(&mut probe, &vars).unwrap();
    let readout = random(&mut rng, probe.value(out).shape(), false);
    let report = finite_difference_check(
        &mut store,
        |tape, s| {
            let vars: Vec<Var> = ids.iter().map(|id| tape.param(s, *id)).collect();
            let out = build(tape, &vars)?;
            let w = tape.input(readout.clone());
            let prod = tape.mul(out, w)?;
            Ok(tape.sum(prod))
        },
        &FdConfig { seed, ..FdConfig::default() },
    )
    .unwrap();
    report.max_rel_error
}

fn dims(seed: u64) -> (usize, usize, usize) {
    let mut rng = substream(seed, Stream::Probe, 1);
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn linear_and_matmul(seed in any::<u64>()) {
        let (n, k, m) = dims(seed);
        assert!(check(seed, &[&[n, k], &[k, m], &[m]], false, |t, v| t.linear(v[0], v[1], Some(v[2]))) < TOL);
        assert!(check(seed, &[&[n, k], &[k, m]], false, |t, v| t.matmul(v[0], v[1])) < TOL);
    }

    #[test]
    fn batched_matmul_both_layouts(seed in any::<u64>()) {
        let (n, k, m) = dims(seed);
        let g = 3;
        assert!(check(seed, &[&[g * n, k], &[g * k, m]], false, |t, v| t.batched_matmul(v[0], v[1], g, false)) < TOL);
        assert!(check(seed, &[&[g * n, k], &[g * m, k]], false, |t, v| t.batched_matmul(v[0], v[1], g, true)) < TOL);
    }

    #[test]
    fn elementwise_binary(seed in any::<u64>()) {
        let (n, k, _) = dims(seed);
        assert!(check(seed, &[&[n, k], &[n, k]], false, |t, v| t.add(v[0], v[1])) < TOL);
        assert!(check(seed, &[&[n, k], &[n, k]], false, |t, v| t.sub(v[0], v[1])) < TOL);
        assert!(check(seed, &[&[n, k], &[n, k]], false, |t, v| t.mul(v[0], v[1])) < TOL);
        assert!(check(seed, &[&[n, k]], false, |t, v| Ok(t.affine(v[0], -1.7, 0.3))) < TOL);
    }

    #[test]
    fn activations(seed in any::<u64>()) {
        let (n, k, _) = dims(seed);
        assert!(check(seed, &[&[n, k]], true, |t, v| Ok(t.relu(v[0]))) < TOL);
        assert!(check(seed, &[&[n, k]], true, |t, v| Ok(t.abs(v[0]))) < TOL);
        assert!(check(seed, &[&[n, k]], false, |t, v| Ok(t.sigmoid(v[0]))) < TOL);
        assert!(check(seed, &[&[n, k]], false, |t, v| Ok(t.tanh(v[0]))) < TOL);
    }

    #[test]
    fn reductions(seed in any::<u64>()) {
        let (n, k, _) = dims(seed);
        assert!(check(seed, &[&[n, k]], false, |t, v| Ok(t.mean(v[0]))) < TOL);
        assert!(check(seed, &[&[n, k]], false, |t, v| Ok(t.sum(v[0]))) < TOL);
    }

    #[test]
    fn softmax_with_and_without_mask(seed in any::<u64>()) {
        let (n, k, _) = dims(seed);
        let k = k + 1;
        let mask: Vec<bool> = (0..n * k).map(|i| i % k <= (i / k) % k).collect();
        assert!(check(seed, &[&[n, k]], false, |t, v| t.softmax_rows(v[0], None)) < TOL);
        assert!(check(seed, &[&[n, k]], false, |t, v| t.softmax_rows(v[0], Some(&mask))) < TOL);
    }

    #[test]
    fn indexing_ops(seed in any::<u64>()) {
        let (n, k, m) = dims(seed);
        let len = n * k;
        let index: Vec<usize> = (0..2 * len).map(|i| (i * 7 + seed as usize % 5) % len).collect();
        assert!(check(seed, &[&[n, k]], false, |t, v| t.gather(v[0], index.clone(), &[2 * n, k])) < TOL);
        assert!(check(seed, &[&[n + 2, k]], false, |t, v| t.row_block(v[0], 1, n)) < TOL);
        assert!(check(seed, &[&[n, k + 2]], false, |t, v| t.slice_cols(v[0], 1, k)) < TOL);
        assert!(check(seed, &[&[n, k], &[n, m]], false, |t, v| t.concat_cols(&[v[0], v[1], v[0]])) < TOL);
        assert!(check(seed, &[&[n, k], &[m, k]], false, |t, v| t.concat_rows(&[v[1], v[0]])) < TOL);
    }

    #[test]
    fn layer_norm(seed in any::<u64>()) {
        let (n, k, _) = dims(seed);
        let k = k + 1;
        assert!(check(seed, &[&[n, k], &[k], &[k]], false, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)) < TOL);
    }

    #[test]
    fn gru_cell(seed in any::<u64>()) {
        let (b, d, _) = dims(seed);
        assert!(check(seed, &[&[b, 3 * d], &[b, 3 * d], &[b, d]], false, |t, v| t.gru_cell(v[0], v[1], v[2])) < TOL);
    }

    #[test]
    fn dropout_with_a_fixed_mask(seed in any::<u64>()) {
        let (n, k, _) = dims(seed);
        assert!(check(seed, &[&[n, k]], false, |t, v| {
            let mut rng = substream(seed, Stream::Dropout, 0);
            t.dropout(v[0], 0.3, true, &mut rng)
        }) < TOL);
    }
}
