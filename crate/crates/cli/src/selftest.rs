use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use latentdrive::intrinsic::{disagreement, Normalizer};
use latentdrive::pipeline::RunDir;
use latentdrive::protocol::Stage;
use latentdrive::Config;
use latentdrive_autodiff::gradcheck::op_suite;
use latentdrive_autodiff::seeded;
use rand::Rng;

const GRAD_TOL: f64 = 1e-4;

fn report(name: &str, ok: bool, detail: String) -> bool {
    eprintln!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn gradients() -> Result<bool> {
    let worst = op_suite(7, 6)?;
    let (op, e) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Ok(report("gradients", e < GRAD_TOL, format!("{} ops, worst {op} {e:.2e}", worst.len())))
}

fn brute_variance(preds: &[Vec<f64>]) -> f64 {
    let k = preds.len() as f64;
    let d = preds[0].len();
    let mut total = 0.0;
    for i in 0..d {
        let mean = preds.iter().map(|p| p[i]).sum::<f64>() / k;
        total += preds.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / k;
    }
    total / d as f64
}

fn disagreement_oracle() -> bool {
    let mut rng = seeded(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=64);
        let preds: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = preds.iter().map(Vec::as_slice).collect();
        worst = worst.max((disagreement(&refs) - brute_variance(&preds)).abs());
    }
    report("disagreement", worst <= 1e-12, format!("max deviation {worst:.2e}"))
}

fn normalizer() -> bool {
    let mut rng = seeded(12);
    let mut ok = true;
    for rate in [1e-3, 1e-2, 1e-1] {
        let mut n = Normalizer::new(rate, 1e-8);
        let (mut mu, mut var) = (0.0f64, 1.0f64);
        for _ in 0..10_000 {
            let g: f64 = rng.gen_range(-3.0..3.0);
            mu = (1.0 - rate) * mu + rate * g;
            var = (1.0 - rate) * var + rate * (g - mu) * (g - mu);
            let want = (g - mu) / (var.sqrt() + 1e-8);
            ok &= n.normalize(g) == want;
        }
    }
    report("normalizer", ok, "exact over 3 rates".into())
}

fn files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root)?.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn pipeline(root: &Path) -> Result<()> {
    let run = RunDir::open(root, &Config::smoke())?;
    run.pretrain()?;
    run.zeroshot(2)?;
    run.finetune()?;
    run.eval(Stage::Finetune, 2)?;
    Ok(())
}

fn determinism(scratch: &Path) -> Result<bool> {
    let (a, b) = (scratch.join("a"), scratch.join("b"));
    pipeline(&a)?;
    pipeline(&b)?;
    let (fa, fb) = (files(&a)?, files(&b)?);
    if fa != fb {
        return Ok(report("determinism", false, "different file sets".into()));
    }
    for f in &fa {
        if fs::read(a.join(f))? != fs::read(b.join(f))? {
            return Ok(report("determinism", false, format!("{} differs", f.display())));
        }
    }
    Ok(report("determinism", true, format!("{} files identical", fa.len())))
}

/// Runs every check; artifacts go under `out` if given, else a temp dir.
pub fn run(out: Option<&Path>) -> Result<bool> {
    let tmp;
    let scratch = match out {
        Some(p) => p.to_path_buf(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let mut ok = gradients()?;
    ok &= disagreement_oracle();
    ok &= normalizer();
    ok &= determinism(&scratch)?;
    Ok(ok)
}
