//! Desk-scale verification suites: oracle equivalence of the fast inference
//! paths and finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spnseq::train::{self, SequenceModel};
use spnseq::{
    chain_brute_force, memm_brute_force, spn_brute_force, ChainModel, ExhaustiveBudget,
    LabeledSequence, LocalFactor, MemmModel, NGramDictionary, Semiring, SpnModel, SpnTopology,
    TransitionBlock,
};

use crate::CliError;

fn random_spn(
    rng: &mut ChaCha8Rng,
    l: usize,
    i: usize,
    h: usize,
    y: usize,
    dim: usize,
) -> SpnModel {
    let topology = SpnTopology::new(l, i, h, y, dim, Semiring::SumProduct).unwrap();
    let mut model = SpnModel::zeros(topology);
    for level in &mut model.weights.prefix_weights {
        for w in level.iter_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
    }
    for w in &mut model.weights.leaf_feature_weights {
        *w = rng.random_range(-1.0..1.0);
    }
    model
}

fn random_chain(rng: &mut ChaCha8Rng, y: usize, dim: usize, second_order: bool) -> ChainModel {
    let mut transitions = vec![TransitionBlock::zeros(
        NGramDictionary::dense(2, y).unwrap(),
    )];
    let mut locals = vec![LocalFactor {
        window_width: 1,
        gram_order: 1,
        spn: SpnModel::zeros(SpnTopology::new(1, 2, 2, y, dim, Semiring::SumProduct).unwrap()),
    }];
    if second_order {
        transitions.push(TransitionBlock::zeros(
            NGramDictionary::dense(3, y).unwrap(),
        ));
        locals.push(LocalFactor {
            window_width: 2,
            gram_order: 2,
            spn: SpnModel::zeros(
                SpnTopology::new(1, 1, 2, y * y, 2 * dim, Semiring::SumProduct).unwrap(),
            ),
        });
    }
    let mut model = ChainModel::new(y, dim, transitions, locals).unwrap();
    let params: Vec<f64> = (0..model.param_len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    model.read_params(&params).unwrap();
    model
}

fn random_obs(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn suite_spn(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = ExhaustiveBudget::default();
    let mut max_err = 0.0f64;
    for trial in 0..40 {
        let (l, i, h) = loop {
            let l = rng.random_range(1..=3);
            let i = rng.random_range(1..=2);
            let h = rng.random_range(1..=3);
            let hidden: u32 = (1..=l as u32).map(|d| (i as u32).pow(d)).sum();
            if (h as u64).pow(hidden) <= 600_000 {
                break (l, i, h);
            }
        };
        let y = rng.random_range(1..=3);
        let dim = rng.random_range(1..=5);
        let model = random_spn(&mut rng, l, i, h, y, dim);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = model.evaluate(&x).map_err(|e| e.to_string())?;
        let oracle = spn_brute_force(&model, &x, &budget).map_err(|e| e.to_string())?;
        for (a, b) in eval.q_values.iter().zip(&oracle) {
            let err = (a - b).abs();
            max_err = max_err.max(err);
            if err > 1e-10 {
                return Err(format!("trial {trial}: rel err {err:e} above 1e-10"));
            }
        }
    }
    Ok(format!("40 models, max rel err {max_err:.2e}"))
}

fn suite_chain(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = ExhaustiveBudget::default();
    let mut max_err = 0.0f64;
    for trial in 0..25 {
        let y = rng.random_range(2..=4);
        let t_len = rng.random_range(1..=5);
        let dim = rng.random_range(1..=2);
        let model = random_chain(&mut rng, y, dim, trial % 3 == 2);
        let obs = random_obs(&mut rng, t_len, dim);
        let messages = model.forward_backward(&obs).map_err(|e| e.to_string())?;
        let oracle = chain_brute_force(&model, &obs, &budget).map_err(|e| e.to_string())?;
        let err = (messages.log_partition - oracle.log_partition).abs();
        max_err = max_err.max(err);
        if err > 1e-10 {
            return Err(format!("trial {trial}: log Z err {err:e} above 1e-10"));
        }
        if messages.partition_agreement() > 1e-9 {
            return Err(format!("trial {trial}: forward/backward disagreement"));
        }
        let (labels, _) = model.viterbi(&obs).map_err(|e| e.to_string())?;
        if labels != oracle.argmax {
            return Err(format!("trial {trial}: Viterbi mismatch"));
        }
    }
    Ok(format!("25 models, max log Z err {max_err:.2e}"))
}

fn suite_memm(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = ExhaustiveBudget::default();
    for trial in 0..20 {
        let y = rng.random_range(2..=3);
        let m = rng.random_range(1..=3);
        let t_len = rng.random_range(1..=5);
        let dim = rng.random_range(1..=2);
        let topology = SpnTopology::new(1, 2, 2, y, dim, Semiring::SumProduct).unwrap();
        let mut model = MemmModel::new(m, SpnModel::zeros(topology), 1, 20).unwrap();
        let params: Vec<f64> = (0..model.param_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        model.read_params(&params).unwrap();
        let obs = random_obs(&mut rng, t_len, dim);
        let oracle = memm_brute_force(&model, &obs, &budget).map_err(|e| e.to_string())?;
        let width = y.pow((m - 1).min(t_len) as u32);
        let decoded = model.decode_beam(&obs, width).map_err(|e| e.to_string())?;
        if decoded != oracle {
            return Err(format!("trial {trial}: beam mismatch at width {width}"));
        }
        if m == 1 {
            let exact = model.decode_viterbi(&obs).map_err(|e| e.to_string())?;
            if exact != oracle {
                return Err(format!("trial {trial}: per-position decode mismatch"));
            }
        }
    }
    Ok("20 models, exact decode agreement".to_string())
}

fn suite_gradients(seed: u64, inject_fault: bool) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..6 {
        let y = rng.random_range(2..=3);
        let dim = rng.random_range(1..=2);
        let t_len = rng.random_range(1..=4);
        let labels: Vec<usize> = (0..t_len).map(|_| rng.random_range(0..y)).collect();
        let seq = LabeledSequence::new(random_obs(&mut rng, t_len, dim), labels).unwrap();

        if trial % 2 == 0 {
            let model = random_chain(&mut rng, y, dim, trial % 4 == 2);
            let (_, mut grad) = model.log_likelihood_grad(&seq).map_err(|e| e.to_string())?;
            if inject_fault && trial == 0 {
                let idx = grad
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                grad[idx] *= 2.0;
            }
            let report = train::compare_gradient(&model, &seq, &grad, 1e-5, train::FD_STEP)
                .map_err(|e| e.to_string())?;
            worst = worst.max(report.max_rel_error);
            if !report.passed() {
                return Err(format!(
                    "trial {trial}: {} gradient components off (max rel {:e})",
                    report.failures.len(),
                    report.max_rel_error
                ));
            }
        } else {
            let order = rng.random_range(1..=3);
            let topology = SpnTopology::new(1, 2, 2, y, dim, Semiring::SumProduct).unwrap();
            let mut model = MemmModel::new(order, SpnModel::zeros(topology), 1, 20).unwrap();
            let params: Vec<f64> = (0..model.param_len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            model.read_params(&params).unwrap();
            let report =
                train::finite_difference_check(&model, &seq, 1e-5).map_err(|e| e.to_string())?;
            worst = worst.max(report.max_rel_error);
            if !report.passed() {
                return Err(format!(
                    "trial {trial}: MEMM gradient off (max rel {:e})",
                    report.max_rel_error
                ));
            }
        }
    }
    Ok(format!("6 models, max rel err {worst:.2e}"))
}

pub fn cmd_verify(scope: &str, seed: u64, inject_fault: bool) -> Result<(), CliError> {
    let suites: Vec<(&str, Box<dyn Fn() -> Result<String, String>>)> = vec![
        ("spn", Box::new(move || suite_spn(seed))),
        ("chain", Box::new(move || suite_chain(seed.wrapping_add(1)))),
        ("memm", Box::new(move || suite_memm(seed.wrapping_add(2)))),
        (
            "gradients",
            Box::new(move || suite_gradients(seed.wrapping_add(3), inject_fault)),
        ),
    ];
    let selected: Vec<_> = suites
        .into_iter()
        .filter(|(name, _)| scope == "all" || scope == *name)
        .collect();
    if selected.is_empty() {
        return Err(CliError::config(format!(
            "unknown verify scope {scope:?}; use all, spn, chain, memm, or gradients"
        )));
    }
    let mut failed = false;
    for (name, suite) in selected {
        match suite() {
            Ok(detail) => println!("verify {name}: ok ({detail})"),
            Err(detail) => {
                println!("verify {name}: FAILED ({detail})");
                failed = true;
            }
        }
    }
    if failed {
        Err(CliError::Verify("one or more suites failed".to_string()))
    } else {
        Ok(())
    }
}
