//! Browser playground for the spectrum-refinement strategies and the
//! Pass@k estimator.
//!
//! Build with `wasm-pack build --target web` and open `www/index.html`
//! from a static file server. Every export is a thin JSON wrapper over
//! `timber-core`'s pure functions, so the logic also compiles and tests
//! natively.

use serde::Serialize;
use timber_core::metrics::{mean_at_k, pass_k_curve, RolloutRecord};
use timber_core::spectral::{erank, threshold_k, SingularSpectrum};
use timber_core::RefineStrategy;
use wasm_bindgen::prelude::wasm_bindgen;

#[derive(Serialize)]
struct SpectrumAnalysis {
    rank: usize,
    erank: f64,
    k: usize,
    ratio: f64,
}

#[derive(Serialize)]
struct RefineOutcome {
    original: Vec<f64>,
    refined: Vec<f64>,
    rank: usize,
    erank: f64,
    k: usize,
    energy_preserved: f64,
}

#[derive(Serialize)]
struct CurveOutcome {
    k: Vec<u64>,
    pass_at_k: Vec<f64>,
    mean_at_k: f64,
    n_problems: usize,
}

fn parse_strategy(name: &str, param: f64) -> Result<RefineStrategy, String> {
    let strategy = match name {
        "timber" => RefineStrategy::Timber { lambda: param },
        "timber-l" => RefineStrategy::TimberL,
        "truncate-r" => RefineStrategy::TruncateR { rank_ratio: param },
        "truncate-e" => RefineStrategy::TruncateE { energy_ratio: param },
        "merge" => RefineStrategy::LinearMerge { mu: param },
        other => return Err(format!("unknown strategy {other}")),
    };
    strategy.validate().map_err(|e| e.to_string())?;
    Ok(strategy)
}

fn spectrum_from(values: Vec<f64>) -> Result<SingularSpectrum, String> {
    SingularSpectrum::from_unsorted(values).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn analyze_impl(values: Vec<f64>, gamma: f64) -> Result<String, String> {
    let s = spectrum_from(values)?;
    let er = erank(&s, gamma).map_err(|e| e.to_string())?;
    let k = threshold_k(&s, gamma).map_err(|e| e.to_string())?;
    to_json(&SpectrumAnalysis {
        rank: s.rank(),
        erank: er,
        k,
        ratio: er / s.rank() as f64,
    })
}

fn refine_impl(values: Vec<f64>, strategy: &str, param: f64, gamma: f64) -> Result<String, String> {
    let s = spectrum_from(values)?;
    let strategy = parse_strategy(strategy, param)?;
    let er = erank(&s, gamma).map_err(|e| e.to_string())?;
    let (refined, k) = strategy.refine_spectrum(&s, gamma).map_err(|e| e.to_string())?;
    let energy =
        timber_core::spectral::energy_preserved(&s, &refined).map_err(|e| e.to_string())?;
    to_json(&RefineOutcome {
        original: s.values().to_vec(),
        refined: refined.values().to_vec(),
        rank: s.rank(),
        erank: er,
        k,
        energy_preserved: energy,
    })
}

fn curve_impl(trials: Vec<u32>, correct: Vec<u32>, max_k: u32) -> Result<String, String> {
    if trials.len() != correct.len() || trials.is_empty() {
        return Err("need matching non-empty trial/correct lists".into());
    }
    let records: Vec<RolloutRecord> = trials
        .iter()
        .zip(&correct)
        .enumerate()
        .map(|(i, (&n, &c))| RolloutRecord::new(format!("p{i}"), n as u64, c as u64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let min_n = trials.iter().copied().min().unwrap_or(1) as u64;
    let top = (max_k as u64).clamp(1, min_n);
    let ks: Vec<u64> = (1..=top).collect();
    let curve = pass_k_curve(&records, &ks).map_err(|e| e.to_string())?;
    let mean = mean_at_k(&records).map_err(|e| e.to_string())?;
    to_json(&CurveOutcome {
        k: curve.k_values,
        pass_at_k: curve.estimates,
        mean_at_k: mean,
        n_problems: curve.n_problems,
    })
}

fn synthetic_impl(rank: u32, decay: f64, tail: f64) -> Vec<f64> {
    let r = rank.max(1) as usize;
    (0..r)
        .map(|i| {
            let t = i as f64 / r as f64;
            (-decay * t).exp() * (1.0 - tail) + tail
        })
        .collect()
}

/// eRank, threshold and ratio of a spectrum, as JSON.
#[wasm_bindgen]
pub fn analyze_spectrum(values: Vec<f64>, gamma: f64) -> Result<String, String> {
    analyze_impl(values, gamma)
}

/// Apply one refinement strategy to a spectrum; JSON with the original and
/// refined values, the cut index and the energy kept. `param` is λ, ρ, e or
/// μ depending on the strategy ("timber-l" ignores it).
#[wasm_bindgen]
pub fn refine_spectrum(
    values: Vec<f64>,
    strategy: &str,
    param: f64,
    gamma: f64,
) -> Result<String, String> {
    refine_impl(values, strategy, param, gamma)
}

/// Unbiased Pass@k curve for per-problem (n, c) counts, k = 1..=max_k
/// (capped at the smallest n), plus Mean@k.
#[wasm_bindgen]
pub fn pass_at_k_curve(trials: Vec<u32>, correct: Vec<u32>, max_k: u32) -> Result<String, String> {
    curve_impl(trials, correct, max_k)
}

/// Exponentially decaying spectrum with a flat floor, for exploring how
/// the strategies respond to different spectral shapes.
#[wasm_bindgen]
pub fn synthetic_spectrum(rank: u32, decay: f64, tail: f64) -> Vec<f64> {
    synthetic_impl(rank, decay, tail)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> serde_json::Value {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn analyze_reports_flat_spectrum_as_full_rank() {
        let out = parse(&analyze_impl(vec![1.0; 6], 1.0).unwrap());
        assert_eq!(out["rank"], 6);
        assert_eq!(out["erank"], 6.0);
        assert_eq!(out["k"], 6);
        assert_eq!(out["ratio"], 1.0);
    }

    #[test]
    fn refine_timber_matches_core_semantics() {
        let out = parse(&refine_impl(vec![4.0, 3.0, 2.0, 1.0], "timber", 0.5, 1.0).unwrap());
        let k = out["k"].as_u64().unwrap() as usize;
        let original: Vec<f64> = out["original"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let refined: Vec<f64> = out["refined"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(&refined[..k], &original[..k]);
        for (r, o) in refined[k..].iter().zip(&original[k..]) {
            assert_eq!(*r, 0.5 * o);
        }
        let energy = out["energy_preserved"].as_f64().unwrap();
        assert!(energy > 0.0 && energy <= 1.0);
    }

    #[test]
    fn refine_rejects_bad_strategy_or_param() {
        assert!(refine_impl(vec![1.0], "nope", 0.5, 1.0).is_err());
        assert!(refine_impl(vec![1.0], "timber", 1.5, 1.0).is_err());
        assert!(refine_impl(vec![], "timber", 0.5, 1.0).is_err());
    }

    #[test]
    fn curve_matches_hand_values() {
        let out = parse(&curve_impl(vec![3], vec![1], 3).unwrap());
        let est: Vec<f64> = out["pass_at_k"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert!((est[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((est[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(est[2], 1.0);
        assert_eq!(out["n_problems"], 1);
    }

    #[test]
    fn curve_caps_k_at_smallest_n() {
        let out = parse(&curve_impl(vec![3, 8], vec![1, 4], 100).unwrap());
        assert_eq!(out["k"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn synthetic_spectrum_is_sorted_and_positive() {
        let s = synthetic_impl(64, 8.0, 0.05);
        assert_eq!(s.len(), 64);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.iter().all(|&v| v > 0.0));
        // flat when decay is zero
        let flat = synthetic_impl(8, 0.0, 0.0);
        assert!(flat.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
