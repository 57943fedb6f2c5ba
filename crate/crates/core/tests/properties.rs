mod common;

use adstest::codec::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use adstest::distill::{frechet_distance, FrechetStats};
use adstest::domain_distance::{categorize_domains, fit_vectors, tertile_sizes, DomainCategory, DomainScore};
use adstest::image::{ClassId, Image, SemanticMask};
use adstest::metrics::ftc;
use adstest::protocol::{decode_mask, encode_mask, read_frame, write_frame, WireView};
use adstest::sim::{EventKind, MisbehaviorEvent};
use adstest::validator::octss;
use proptest::prelude::*;

fn mask_pair() -> impl Strategy<Value = (SemanticMask, SemanticMask)> {
    (1usize..12, 1usize..12, 1u8..=6).prop_flat_map(|(w, h, k)| {
        let n = w * h;
        (
            prop::collection::vec(0..k, n),
            prop::collection::vec(0..k, n),
        )
            .prop_map(move |(a, b)| (SemanticMask::new(w, h, a).unwrap(), SemanticMask::new(w, h, b).unwrap()))
    })
}

fn image() -> impl Strategy<Value = Image> {
    (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<u8>(), w * h * 3).prop_map(move |p| Image::new(w, h, p).unwrap())
    })
}

fn stats(d: usize) -> impl Strategy<Value = FrechetStats> {
    (
        prop::collection::vec(-2.0f64..2.0, d),
        prop::collection::vec(-1.0f64..1.0, d * d),
    )
        .prop_map(move |(mu, a)| {
            // A·Aᵀ + 0.1 I is symmetric positive definite.
            let mut s = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    s[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>();
                }
                s[i * d + i] += 0.1;
            }
            FrechetStats::new(mu, s).unwrap()
        })
}

proptest! {
    #[test]
    fn octss_matches_set_oracle((a, b) in mask_pair(), c in 0u8..6) {
        let c = ClassId(c);
        prop_assert_eq!(octss(&a, &b, c).unwrap(), common::brute_iou(&a, &b, c));
    }

    #[test]
    fn octss_symmetric_and_bounded((a, b) in mask_pair(), c in 0u8..6) {
        let ab = octss(&a, &b, ClassId(c)).unwrap();
        prop_assert_eq!(ab, octss(&b, &a, ClassId(c)).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(octss(&a, &a, ClassId(c)).unwrap(), 1.0);
    }

    #[test]
    fn ppm_round_trip(img in image()) {
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img.clone());
        prop_assert_eq!(WireView::encode(&img).decode().unwrap(), img);
    }

    #[test]
    fn mask_round_trip((a, _) in mask_pair()) {
        prop_assert_eq!(decode_pgm(&encode_pgm(&a), &ClassId::ALL).unwrap(), a.clone());
        prop_assert_eq!(decode_mask(&encode_mask(&a)).unwrap(), a);
    }

    #[test]
    fn frames_round_trip(payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..300), 1..5)) {
        let mut buf = Vec::new();
        for p in &payloads {
            write_frame(&mut buf, p, 1024).unwrap();
        }
        let mut r = &buf[..];
        for p in &payloads {
            let got = read_frame(&mut r, 1024).unwrap();
            prop_assert_eq!(got.as_deref(), Some(&p[..]));
        }
        prop_assert!(read_frame(&mut r, 1024).unwrap().is_none());
    }

    #[test]
    fn frechet_symmetric_nonnegative(a in stats(4), b in stats(4)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn ftc_bounded(sectors in prop::collection::vec(0usize..40, 0..30)) {
        let ev: Vec<_> = sectors.iter().map(|&s| MisbehaviorEvent { kind: EventKind::Oob, step: 0, sector: s, s: 0.0 }).collect();
        let v = ftc(&ev, 40).unwrap();
        let mut distinct = sectors.clone();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assert_eq!(v, 100.0 * distinct.len() as f64 / 40.0);
    }

    #[test]
    fn tertiles_cover_all(n in 0usize..200) {
        let t = tertile_sizes(n);
        prop_assert_eq!(t.iter().sum::<usize>(), n);
        prop_assert!(t.iter().max().unwrap() - t.iter().min().unwrap() <= 1);
    }

    #[test]
    fn in_span_vectors_reconstruct_exactly(coef in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6..12),
                                            probe in prop::collection::vec(-3.0f64..3.0, 3)) {
        // Samples live in a 3-dimensional affine subspace of R^10.
        let basis = [
            [1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5],
            [0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 1.0, 0.0],
        ];
        let offset = [0.5; 10];
        let at = |c: &[f64]| -> Vec<f64> {
            (0..10).map(|j| offset[j] + (0..3).map(|i| c[i] * basis[i][j]).sum::<f64>()).collect()
        };
        let samples: Vec<Vec<f64>> = coef.iter().map(|c| at(c)).collect::<Vec<_>>();
        let m = fit_vectors(&samples, 3).unwrap();
        m.validate().unwrap();
        prop_assume!(centered_rank(&coef) == 3);
        let e = m.vector_error(&at(&probe));
        prop_assert!(e < 1e-9, "error {e}");
    }
}

// Rank of the centered coefficient matrix, computed by elimination.
fn centered_rank(rows: &[Vec<f64>]) -> usize {
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut m: Vec<Vec<f64>> = rows.iter().map(|r| (0..3).map(|j| r[j] - mean[j]).collect()).collect();
    let mut rank = 0;
    for col in 0..3 {
        let Some(p) = (rank..m.len()).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())) else {
            break;
        };
        if m[p][col].abs() < 1e-3 {
            continue;
        }
        m.swap(rank, p);
        for r in 0..m.len() {
            if r != rank {
                let f = m[r][col] / m[rank][col];
                for c in 0..3 {
                    m[r][c] -= f * m[rank][c];
                }
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn orthogonal_probe_error_is_squared_norm_over_dim() {
    // Training spans the first two axes of R^5; an orthogonal probe keeps its full norm.
    let samples = vec![
        vec![1.0, 0.0, 0.0, 0.0, 0.0],
        vec![-1.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0, 0.0],
        vec![0.0, -1.0, 0.0, 0.0, 0.0],
    ];
    let m = fit_vectors(&samples, 2).unwrap();
    let probe = [0.0, 0.0, 3.0, 4.0, 0.0];
    assert!((m.vector_error(&probe) - 25.0 / 5.0).abs() < 1e-12);
}

#[test]
fn tertiles_with_ties_are_stable() {
    let s = |d: &str, e: f64| DomainScore { domain: d.into(), mean_error: e, n_samples: 1 };
    let scores = vec![s("a", 1.0), s("b", 1.0), s("c", 1.0), s("d", 2.0), s("e", 0.5)];
    let cats = categorize_domains(&scores).unwrap();
    let get = |n: &str| cats.iter().find(|(d, _)| d == n).unwrap().1;
    assert_eq!(get("e"), DomainCategory::InDistribution);
    assert_eq!(get("a"), DomainCategory::InDistribution);
    assert_eq!(get("b"), DomainCategory::InBetween);
    assert_eq!(get("c"), DomainCategory::InBetween);
    assert_eq!(get("d"), DomainCategory::OutOfDistribution);
}
