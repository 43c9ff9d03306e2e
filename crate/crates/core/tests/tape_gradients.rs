//! Each tape primitive against central differences. Non-scalar outputs are
//! reduced to a scalar with fixed random vectors, `uᵀ · Y · w`.

use promptalign::numerics::{finite_diff_check, DenseMatrix, GradTape, Gradients, ParamId, ParamSet, Var};
use promptalign::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Records `uᵀ · y · w` for constant `u`, `w` of matching shape.
fn reduce(tape: &mut GradTape, y: Var, rng_seed: u64) -> Result<Var> {
    let (rows, cols) = tape.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let u = tape.constant(random(&mut rng, 1, rows, -1.0, 1.0));
    let w = tape.constant(random(&mut rng, cols, 1, -1.0, 1.0));
    let uy = tape.matmul(u, y)?;
    tape.matmul(uy, w)
}

/// Runs a finite-difference check of `build` over `params`.
fn check<F>(params: ParamSet, build: F) -> std::result::Result<(), TestCaseError>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<(f64, Gradients)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = p.iter().map(|(id, _, v)| tape.param(id, v.clone())).collect();
        let root = build(&mut tape, &vars)?;
        let loss = tape.value(root).data()[0];
        Ok((loss, tape.backward(root)?))
    };
    let report = finite_diff_check(eval, &params, H, TOL).unwrap();
    prop_assert!(report.passed(), "max rel err {:e} at {:?}", report.max_rel_err, report.worst);
    Ok(())
}

fn params(values: Vec<DenseMatrix>) -> ParamSet {
    let mut p = ParamSet::new();
    for (i, v) in values.into_iter().enumerate() {
        p.push(format!("x{i}"), v);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn primitives_match_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, k, c) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(2..=4));
        let red = seed ^ 0x5eed;

        let a = random(&mut rng, r, k, -1.0, 1.0);
        let b = random(&mut rng, k, c, -1.0, 1.0);
        check(params(vec![a.clone(), b]), |t, v| { let y = t.matmul(v[0], v[1])?; reduce(t, y, red) })?;

        let bt = random(&mut rng, c, k, -1.0, 1.0);
        check(params(vec![a.clone(), bt]), |t, v| { let y = t.matmul_transposed(v[0], v[1])?; reduce(t, y, red) })?;

        check(params(vec![a.clone()]), |t, v| { let y = t.transpose(v[0]); reduce(t, y, red) })?;

        let bias = random(&mut rng, 1, k, -1.0, 1.0);
        check(params(vec![a.clone(), bias]), |t, v| { let y = t.add_row_bias(v[0], v[1])?; reduce(t, y, red) })?;

        // rows bounded away from zero norm
        let n = random(&mut rng, r, k, 0.2, 1.0).map(|x| if rng_sign(x) { x } else { -x });
        check(params(vec![n]), |t, v| { let y = t.l2_normalize_rows(v[0])?; reduce(t, y, red) })?;

        let s = random(&mut rng, 1, 1, -1.0, 1.0);
        check(params(vec![a.clone(), s]), |t, v| { let y = t.scale_by_exp(v[0], v[1])?; reduce(t, y, red) })?;

        let alpha = rng.random_range(-2.0..2.0);
        check(params(vec![a.clone()]), |t, v| { let y = t.scale(v[0], alpha); reduce(t, y, red) })?;

        let a2 = random(&mut rng, r, k, -1.0, 1.0);
        check(params(vec![a.clone(), a2]), |t, v| { let y = t.add(v[0], v[1])?; reduce(t, y, red) })?;

        let logits = random(&mut rng, r, c, -3.0, 3.0);
        check(params(vec![logits]), |t, v| { let y = t.softmax_rows(v[0])?; reduce(t, y, red) })?;

        let target = {
            let raw = random(&mut rng, r, c, 0.0, 1.0);
            let rows: Vec<Vec<f64>> = (0..r)
                .map(|i| {
                    let z: f64 = raw.row(i).iter().sum();
                    raw.row(i).iter().map(|x| x / z).collect()
                })
                .collect();
            DenseMatrix::from_rows(&rows).unwrap()
        };
        let p = random(&mut rng, r, c, 0.1, 1.0);
        check(params(vec![p]), move |t, v| t.kl_row_mean(target.clone(), v[0]))?;
    }
}

/// Deterministic sign pattern derived from the value's low mantissa bit.
fn rng_sign(x: f64) -> bool {
    x.to_bits() & 1 == 0
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, 3, 3, -1.0, 1.0);
    let eval = |p: &ParamSet| -> Result<(f64, Gradients)> {
        let mut tape = GradTape::new();
        let x = tape.param(ParamId(0), p.get(ParamId(0)).clone());
        let xx = tape.matmul(x, x)?;
        let sm = tape.softmax_rows(xx)?;
        let y = tape.add(sm, x)?;
        let root = reduce(&mut tape, y, 11)?;
        let loss = tape.value(root).data()[0];
        Ok((loss, tape.backward(root)?))
    };
    let report = finite_diff_check(eval, &params(vec![a]), H, TOL).unwrap();
    assert!(report.passed(), "{:?}", report.worst);
}
