use hclnet::contrastive::{info_nce, superpixel_info_nce_anchor};
use hclnet::decomposition::{freeman_powers, haalpha, krogager, FeatureCube};
use hclnet::filter::beam_search_groups;
use hclnet::metrics::ConfusionMatrix;
use hclnet::polsar::*;
use hclnet::superpixel::{slic, SlicParams, SlicState};
use proptest::prelude::*;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn scattering() -> impl Strategy<Value = ScatteringMatrix> {
    prop::array::uniform6(-2.0f64..2.0).prop_map(|v| ScatteringMatrix::monostatic(c(v[0], v[1]), c(v[2], v[3]), c(v[4], v[5])))
}

fn looks(n: usize) -> impl Strategy<Value = Hermitian3> {
    prop::collection::vec(scattering(), n).prop_map(|ss| {
        ss.iter().fold(Hermitian3::ZERO, |a, s| a.add(&build_coherency(s)))
    })
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn embedding(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3)).prop_map(|v| unit(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn single_look_matrices_are_rank_one_psd(s in scattering()) {
        let t = build_coherency(&s);
        let cv = build_covariance(&s);
        let span = s.span();
        for m in [&t.0, &cv.0] {
            prop_assert!(m.is_psd());
            prop_assert!(m.rank(1e-9) <= 1);
            prop_assert!((m.trace() - span).abs() <= 1e-12 * span.max(1.0));
        }
        let back = covariance_to_coherency(&coherency_to_covariance(&t).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&t) <= 1e-12 * span.max(1.0));
        prop_assert!(coherency_to_covariance(&t).unwrap().max_abs_diff(&cv) <= 1e-12 * span.max(1.0));
    }

    #[test]
    fn haalpha_bounds_and_scale_invariance(m in looks(3), scale in 0.01f64..100.0) {
        let t = CoherencyMatrix(m);
        let r = haalpha(&t).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.entropy));
        prop_assert!((0.0..=1.0).contains(&r.anisotropy));
        prop_assert!((0.0..=90.0).contains(&r.alpha));
        prop_assert!((r.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let s = haalpha(&CoherencyMatrix(m.scale(scale))).unwrap();
        prop_assert!((r.entropy - s.entropy).abs() < 1e-9);
        prop_assert!((r.anisotropy - s.anisotropy).abs() < 1e-9);
        prop_assert!((r.alpha - s.alpha).abs() < 1e-9);
    }

    #[test]
    fn freeman_forward_model_conserves_span(
        f in 0.05f64..2.0, fv in 0.0f64..2.0, ratio in 0.05f64..0.95,
        re in 0.1f64..0.95, im in -0.3f64..0.3, surface_branch in any::<bool>(),
    ) {
        // One coefficient is pinned per branch, as the solver assumes, and the
        // free one is drawn so the remainder's Re C13 has the branch's sign.
        let (fs, fd, b, a) = if surface_branch {
            (f, ratio * f * re, c(re, im), c(-1.0, 0.0))
        } else {
            (ratio * f * re, f, c(1.0, 0.0), c(-re, im))
        };
        let surface = Hermitian3::outer([b, c(0.0, 0.0), c(1.0, 0.0)]).scale(fs);
        let double = Hermitian3::outer([a, c(0.0, 0.0), c(1.0, 0.0)]).scale(fd);
        let volume = Hermitian3 { m11: 1.0, m22: 2.0 / 3.0, m33: 1.0, m13: c(1.0 / 3.0, 0.0), ..Hermitian3::ZERO }.scale(fv);
        let cv = CovarianceMatrix(surface.add(&double).add(&volume));
        let p = freeman_powers(&cv);
        prop_assert!(p.odd >= 0.0 && p.dbl >= 0.0 && p.vol >= 0.0);
        let span = cv.trace();
        prop_assert!((p.odd + p.dbl + p.vol - span).abs() < 1e-9 * span);
        let (want_odd, want_dbl) = (fs * (1.0 + b.norm_sqr()), fd * (1.0 + a.norm_sqr()));
        prop_assert!((p.odd - want_odd).abs() < 1e-9 * span);
        prop_assert!((p.dbl - want_dbl).abs() < 1e-9 * span);
    }

    #[test]
    fn krogager_amplitudes_are_bounded(s in scattering()) {
        let k = krogager(&s);
        prop_assert!(k.sphere >= 0.0 && k.diplane >= 0.0 && k.helix >= 0.0);
        prop_assert!(k.sphere.powi(2) + k.diplane.powi(2) + k.helix.powi(2) <= 2.0 * s.span() + 1e-12);
    }

    #[test]
    fn multilook_rank_is_bounded(m in looks(2)) {
        prop_assert!(m.rank(1e-9) <= 2);
    }

    #[test]
    fn speckle_filter_keeps_psd_and_interior_mean(ms in prop::collection::vec(looks(2), 36)) {
        let img = PolSARImage::new(6, 6, ms.into_iter().map(CoherencyMatrix).collect()).unwrap();
        let out = speckle_filter(&img, 3).unwrap();
        prop_assert!(out.pixels.iter().all(|p| p.is_psd()));
        // The interior of the input equals the mean of the 3x3 windows centred on it.
        let mut sum = Hermitian3::ZERO;
        for r in 1..5 {
            for col in 1..5 {
                sum = sum.add(out.pixel(r, col));
            }
        }
        let mut direct = Hermitian3::ZERO;
        for r in 1..5 {
            for col in 1..5 {
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        direct = direct.add(img.pixel((r as isize + dr) as usize, (col as isize + dc) as usize));
                    }
                }
            }
        }
        prop_assert!(sum.max_abs_diff(&direct.scale(1.0 / 9.0)) < 1e-9 * direct.trace().max(1.0));
    }

    #[test]
    fn patch_centre_is_the_pixel(ms in prop::collection::vec(looks(1), 25), row in 0usize..5, col in 0usize..5) {
        let img = PolSARImage::new(5, 5, ms.into_iter().map(CoherencyMatrix).collect()).unwrap();
        let patch = extract_patch(&img, row, col, 7).unwrap();
        let reals = img.pixel(row, col).to_reals();
        for (ch, v) in reals.iter().enumerate() {
            prop_assert_eq!(patch.get(3, 3, ch), *v);
        }
    }

    #[test]
    fn masking_restores_bits(values in prop::collection::vec(-1e3f32..1e3, 12), group in 0usize..3) {
        let mut cube = FeatureCube::new(2, 2, vec![0, 1, 2], vec!["a".into(), "b".into(), "c".into()], values.clone()).unwrap();
        cube.set_mask(cube.mask_without(&[group])).unwrap();
        for p in 0..4 {
            prop_assert_eq!(cube.value(p, group), 0.0);
        }
        cube.set_mask(vec![true; 3]).unwrap();
        for p in 0..4 {
            for f in 0..3 {
                prop_assert_eq!(cube.value(p, f).to_bits(), values[p * 3 + f].to_bits());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn negatives_permute_freely(q in embedding(8), k in embedding(8), negs in prop::collection::vec(embedding(8), 1..6), tau in 0.05f64..2.0) {
        let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let mut rev = refs.clone();
        rev.reverse();
        let a = info_nce(&q, &k, &refs, tau).unwrap();
        let b = info_nce(&q, &k, &rev, tau).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_as_the_positive_aligns(q in embedding(6), negs in prop::collection::vec(embedding(6), 1..5), w in 0.05f64..0.95) {
        // Positives q.k = cos moving from a random direction towards q.
        let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let other: Vec<f64> = unit(&q.iter().enumerate().map(|(i, x)| if i == 0 { x - 1.0 } else { -x + 0.3 }).collect::<Vec<_>>());
        let blend = |t: f64| unit(&q.iter().zip(&other).map(|(a, b)| t * a + (1.0 - t) * b).collect::<Vec<_>>());
        let (lo, hi) = (blend(w * 0.5), blend(w));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        prop_assume!(dot(&q, &hi) > dot(&q, &lo) + 1e-9);
        prop_assert!(info_nce(&q, &hi, &refs, 0.1).unwrap() < info_nce(&q, &lo, &refs, 0.1).unwrap());
    }

    #[test]
    fn grouped_loss_reduces_to_info_nce(keys in prop::collection::vec(embedding(5), 2..12), qs in prop::collection::vec(embedding(5), 12)) {
        let b = keys.len();
        let ids: Vec<u32> = (0..b as u32).collect();
        for i in 0..b {
            let negs: Vec<&[f64]> = keys.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, k)| k.as_slice()).collect();
            let plain = info_nce(&qs[i], &keys[i], &negs, 0.07).unwrap();
            let grouped = superpixel_info_nce_anchor(i, &qs[i], &keys, &ids, 0.07).unwrap();
            prop_assert!((grouped * (b - 1) as f64 - plain).abs() < 1e-10);
        }
    }

    #[test]
    fn metrics_survive_class_relabelling(rows in prop::collection::vec(prop::collection::vec(0u64..50, 4), 4), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        prop_assume!(rows.iter().flatten().sum::<u64>() > 0);
        let a = ConfusionMatrix::from_rows(&rows).unwrap().metrics().unwrap();
        let permuted: Vec<Vec<u64>> = (0..4).map(|i| (0..4).map(|j| rows[perm[i]][perm[j]]).collect()).collect();
        let b = ConfusionMatrix::from_rows(&permuted).unwrap().metrics().unwrap();
        prop_assert!((a.oa - b.oa).abs() < 1e-12 && (a.aa - b.aa).abs() < 1e-12 && (a.kappa - b.kappa).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.oa) && (0.0..=1.0).contains(&a.aa));
        prop_assert!((-1.0..=1.0).contains(&a.kappa));
    }

    #[test]
    fn equal_row_sums_give_oa_equal_aa(diag in prop::collection::vec(0u64..20, 3), total in 20u64..40) {
        let rows: Vec<Vec<u64>> = (0..3).map(|i| (0..3).map(|j| if i == j { diag[i] } else if j == (i + 1) % 3 { total - diag[i] } else { 0 }).collect()).collect();
        let m = ConfusionMatrix::from_rows(&rows).unwrap().metrics().unwrap();
        prop_assert!((m.oa - m.aa).abs() < 1e-12);
    }

    #[test]
    fn beam_schedule_one_is_greedy(scores in prop::collection::vec(0.0f64..1.0, 64), theta in 1usize..5) {
        let n = 6;
        let table = |removed: &[usize]| scores[removed.iter().map(|&g| 1usize << g).sum::<usize>() % 64];
        let r = beam_search_groups(n, theta, &[1], |rm| Ok(table(rm))).unwrap();
        // Plain greedy backward elimination with the same tie rule.
        let mut removed: Vec<usize> = Vec::new();
        while n - removed.len() > theta {
            let mut best: Option<(f64, Vec<usize>)> = None;
            for g in (0..n).filter(|g| !removed.contains(g)) {
                let mut cand = removed.clone();
                cand.push(g);
                cand.sort_unstable();
                let s = table(&cand);
                if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
                    best = Some((s, cand));
                }
            }
            removed = best.unwrap().1;
        }
        prop_assert_eq!(r.best.removed, removed);
        for (i, round) in r.rounds.iter().enumerate() {
            prop_assert!(round.iter().all(|s| s.removed.len() == i + 1));
        }
    }

    #[test]
    fn distinct_scores_ignore_group_order(weights in prop::collection::vec(0.0f64..1.0, 5), pairs in prop::collection::vec(0.0f64..0.2, 25)) {
        // Score of a kept set with pairwise interactions; enumerating groups in
        // reverse must select the same physical groups.
        let score = |kept: &[usize]| kept.iter().map(|&g| weights[g]).sum::<f64>()
            + kept.iter().flat_map(|&a| kept.iter().map(move |&b| (a, b))).filter(|(a, b)| a < b).map(|(a, b)| pairs[a * 5 + b]).sum::<f64>();
        let keep = |removed: &[usize], map: &dyn Fn(usize) -> usize| (0..5).filter(|g| !removed.contains(g)).map(map).collect::<Vec<_>>();
        let fwd = beam_search_groups(5, 2, &[2, 2, 2, 1], |rm| Ok(score(&keep(rm, &|g| g)))).unwrap();
        let rev = beam_search_groups(5, 2, &[2, 2, 2, 1], |rm| Ok(score(&keep(rm, &|g| 4 - g)))).unwrap();
        let mut all: Vec<f64> = (0..32usize).map(|m| score(&(0..5).filter(|g| m >> g & 1 == 1).collect::<Vec<_>>())).collect();
        all.sort_by(f64::total_cmp);
        prop_assume!(all.windows(2).all(|w| w[1] - w[0] > 1e-12));
        let mut mapped: Vec<usize> = rev.kept_groups().iter().map(|g| 4 - g).collect();
        mapped.sort_unstable();
        prop_assert_eq!(fwd.kept_groups(), mapped);
    }
}

fn blocky_features(h: usize, w: usize, seed: u64) -> Vec<[f64; 3]> {
    // Piecewise-constant blobs plus small noise from an LCG.
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    let mut noise = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
    };
    let levels: Vec<[f64; 3]> = (0..9).map(|_| [noise() * 4.0, noise() * 4.0, noise() * 4.0]).collect();
    (0..h * w)
        .map(|p| {
            let (r, c) = (p / w, p % w);
            let l = &levels[(r * 3 / h) * 3 + c * 3 / w];
            [l[0] + 0.2 * noise(), l[1] + 0.2 * noise(), l[2] + 0.2 * noise()]
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn slic_covers_connects_and_sizes(h in 20usize..48, w in 20usize..48, k in 4usize..20, seed in any::<u64>()) {
        let f = blocky_features(h, w, seed);
        let map = slic(&f, h, w, &SlicParams::new(k)).unwrap();
        prop_assert_eq!(map.sizes.iter().sum::<usize>(), h * w);
        let kp = map.count as f64;
        prop_assert!(kp >= 0.8 * k as f64 && kp <= 1.2 * k as f64, "K' = {} for K = {}", kp, k);
        for (id, members) in map.members().iter().enumerate() {
            prop_assert_eq!(components(&map.ids, h, w, id as u32, members[0]), members.len());
        }
    }

    #[test]
    fn slic_energy_never_rises(h in 12usize..32, w in 12usize..32, k in 2usize..12, seed in any::<u64>()) {
        let f = blocky_features(h, w, seed);
        let mut s = SlicState::new(&f, h, w, &SlicParams::new(k)).unwrap();
        let mut e = s.energy();
        for _ in 0..15 {
            s.assign();
            let ea = s.energy();
            prop_assert!(ea <= e + 1e-9 * e.max(1.0));
            s.update();
            let eu = s.energy();
            prop_assert!(eu <= ea + 1e-9 * ea.max(1.0));
            e = eu;
        }
        // Converged centres reproduce their own assignment.
        for _ in 0..100 {
            if s.assign() == 0 {
                break;
            }
            s.update();
        }
        prop_assert_eq!(s.assign(), 0);
    }
}

/// Size of the 4-connected component of `id` containing `start`.
fn components(ids: &[u32], h: usize, w: usize, id: u32, start: usize) -> usize {
    let mut seen = vec![false; h * w];
    let mut stack = vec![start];
    seen[start] = true;
    let mut n = 0;
    while let Some(p) = stack.pop() {
        n += 1;
        let (r, c) = (p / w, p % w);
        let mut push = |q: usize| {
            if !seen[q] && ids[q] == id {
                seen[q] = true;
                stack.push(q);
            }
        };
        if r > 0 {
            push(p - w);
        }
        if r + 1 < h {
            push(p + w);
        }
        if c > 0 {
            push(p - 1);
        }
        if c + 1 < w {
            push(p + 1);
        }
    }
    n
}
