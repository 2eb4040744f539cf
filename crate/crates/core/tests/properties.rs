use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use tilevote::aggregate::{
    argmax_lowest, compute_metrics, majority_vote, probability_vote, Reduction, TileScores, TileVote,
};
use tilevote::datasets::{make_folds, stratified_split, ClassQuota, Split};
use tilevote::knn::EmbeddingIndex;
use tilevote::saliency::{normalize_map, upsample_map, weighted_relu_sum};
use tilevote::tiling::{compute_grid, decode_tile_id, encode_tile_id, resize_bilinear, stitch, tile_image};
use tilevote::trainer::StoppingProtocol;
use tilevote::{GrayImage, GridSpec, NUM_CLASSES};

fn image(h: usize, w: usize, seed: u64) -> GrayImage {
    GrayImage::from_fn(h, w, |y, x| {
        let v = (y as u64 * 7919 + x as u64 * 104729 + seed * 31).wrapping_mul(2654435761) % 1000;
        v as f32 / 999.0
    })
}

fn score_vec() -> impl Strategy<Value = TileScores> {
    prop::array::uniform4(0.0f64..1.0).prop_filter_map("zero mass", |raw| {
        let s: f64 = raw.iter().sum();
        (s > 1e-3).then(|| TileScores(raw.map(|v| v / s)))
    })
}

fn ids_by_class(sizes: &[usize]) -> Vec<Vec<String>> {
    sizes
        .iter()
        .enumerate()
        .map(|(c, &n)| (0..n).map(|i| format!("c{c}_img{i:03}")).collect())
        .collect()
}

// Independent brute-force kNN: sort by (distance, index), count labels, break
// label ties by summed distance then class ID.
fn knn_oracle(data: &[Vec<f32>], labels: &[usize], k: usize, q: &[f32]) -> (usize, [f64; NUM_CLASSES], Vec<usize>) {
    let mut d: Vec<(f64, usize)> = data
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let s: f64 = row.iter().zip(q).map(|(a, b)| ((*a - *b) as f64).powi(2)).sum();
            (s.sqrt(), i)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let top = &d[..k];
    let mut count = [0usize; NUM_CLASSES];
    let mut dist = [0.0f64; NUM_CLASSES];
    for &(di, i) in top {
        count[labels[i]] += 1;
        dist[labels[i]] += di;
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if count[c] > count[best] || (count[c] == count[best] && dist[c] < dist[best]) {
            best = c;
        }
    }
    (best, count.map(|n| n as f64 / k as f64), top.iter().map(|t| t.1).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn grid_covers_the_retained_region(h in 1usize..200, w in 1usize..200, r in 1usize..12, c in 1usize..12) {
        prop_assume!(r <= h && c <= w);
        let rects = compute_grid(h, w, GridSpec::new(r, c).unwrap()).unwrap();
        let (th, tw) = (h / r, w / c);
        prop_assert_eq!(rects.iter().map(|t| t.area()).sum::<usize>(), r * c * th * tw);
        for (i, a) in rects.iter().enumerate() {
            prop_assert_eq!((a.x0, a.y0), (a.col_index * tw, a.row_index * th));
            for b in &rects[i + 1..] {
                prop_assert!(!a.intersects(b));
            }
        }
    }

    #[test]
    fn oversized_grid_is_rejected(h in 1usize..20, w in 1usize..20, extra in 1usize..5) {
        prop_assert!(compute_grid(h, w, GridSpec::new(h + extra, 1).unwrap()).is_err());
        prop_assert!(compute_grid(h, w, GridSpec::new(1, w + extra).unwrap()).is_err());
    }

    #[test]
    fn stitching_reproduces_the_crop(h in 1usize..60, w in 1usize..60, r in 1usize..7, c in 1usize..7, seed in 0u64..1000) {
        prop_assume!(r <= h && c <= w);
        let img = image(h, w, seed);
        let grid = GridSpec::new(r, c).unwrap();
        let tiles: Vec<GrayImage> = tile_image(&img, grid, "src", 2).unwrap().into_iter().map(|t| t.1).collect();
        let back = stitch(&tiles, grid).unwrap();
        let crop = img.crop(0, 0, (h / r) * r, (w / c) * c).unwrap();
        prop_assert_eq!(back, crop);
    }

    #[test]
    fn tile_id_round_trips(source in "[a-z0-9_]{1,12}", row in 0usize..100, col in 0usize..100) {
        let id = encode_tile_id(&source, row, col);
        prop_assert_eq!(decode_tile_id(&id).unwrap(), (source.clone(), row, col));
        prop_assert_eq!(encode_tile_id(&source, row, col), id);
    }

    #[test]
    fn tiles_inherit_label_and_id(r in 1usize..5, c in 1usize..5, label in 0usize..4) {
        let img = image(20, 20, 1);
        for (rec, px) in tile_image(&img, GridSpec::new(r, c).unwrap(), "a_b", label).unwrap() {
            prop_assert_eq!(rec.label, label);
            prop_assert_eq!(decode_tile_id(&rec.tile_id).unwrap(), ("a_b".to_string(), rec.rect.row_index, rec.rect.col_index));
            prop_assert_eq!((px.height(), px.width()), (rec.rect.height, rec.rect.width));
        }
    }

    #[test]
    fn resize_shape_ignores_aspect(h in 1usize..80, w in 1usize..80, s in 1usize..40) {
        let out = resize_bilinear(&image(h, w, 3), s, s).unwrap();
        prop_assert_eq!((out.height(), out.width()), (s, s));
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_leak_free_and_meets_quota(
        sizes in prop::array::uniform4(6usize..30),
        val in 1usize..3,
        test in 1usize..3,
        seed: u64,
    ) {
        let ids = ids_by_class(&sizes);
        let quotas: Vec<ClassQuota> = sizes.iter().map(|&n| ClassQuota::remainder_train(n, val, test)).collect();
        let m = stratified_split(&ids, &quotas, seed).unwrap();
        prop_assert_eq!(m.entries().len(), sizes.iter().sum::<usize>());
        for (c, q) in quotas.iter().enumerate() {
            prop_assert_eq!(m.count(Split::Train, c), q.train);
            prop_assert_eq!(m.count(Split::Val, c), q.val);
            prop_assert_eq!(m.count(Split::Test, c), q.test);
        }
        let (tr, va, te) = (m.ids(Split::Train), m.ids(Split::Val), m.ids(Split::Test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(stratified_split(&ids, &quotas, seed).unwrap(), m);
    }

    #[test]
    fn folds_partition_the_training_split(sizes in prop::array::uniform4(8usize..30), k in 2usize..6, seed: u64) {
        let ids = ids_by_class(&sizes);
        let quotas: Vec<ClassQuota> = sizes.iter().map(|&n| ClassQuota::remainder_train(n, 1, 1)).collect();
        let m = stratified_split(&ids, &quotas, seed).unwrap();
        let folds = make_folds(&m, k, seed ^ 1).unwrap();
        let train = m.ids(Split::Train);
        prop_assert_eq!(folds.fold_of.keys().map(String::as_str).collect::<BTreeSet<_>>(), train.clone());
        for c in 0..NUM_CLASSES {
            let per_fold: Vec<usize> = (0..k)
                .map(|f| folds.fold_ids(f).iter().filter(|id| m.get(id).unwrap().class == c).count())
                .collect();
            prop_assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
        }
        for f in 0..k {
            let (fit, held) = folds.partition(f);
            prop_assert!(fit.is_disjoint(&held));
            prop_assert_eq!(fit.union(&held).copied().collect::<BTreeSet<_>>(), train.clone());
        }
    }

    #[test]
    fn knn_matches_exhaustive_scan(
        data in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 5), 8..40),
        label_seed: u64,
        k in 1usize..8,
        query in prop::collection::vec(-3.0f32..3.0, 5),
    ) {
        let labels: Vec<usize> = (0..data.len()).map(|i| ((label_seed >> (i % 60)) as usize + i) % NUM_CLASSES).collect();
        let n = data.len();
        let arr = Array2::from_shape_vec((n, 5), data.concat()).unwrap();
        let index = EmbeddingIndex::build(arr.view(), &labels, k).unwrap();
        let got = index.classify(&query).unwrap();
        let (label, scores, order) = knn_oracle(&data, &labels, k, &query);
        prop_assert_eq!(got.label, label);
        prop_assert_eq!(got.scores.0, scores);
        prop_assert_eq!(got.neighbors.iter().map(|nb| nb.index).collect::<Vec<_>>(), order.clone());
        prop_assert!((got.scores.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for s in got.scores.0 {
            prop_assert!(((s * k as f64).round() - s * k as f64).abs() < 1e-9);
        }

        // Reversing the training order changes nothing when distances are distinct.
        let mut d: Vec<f64> = order.iter().map(|&i| got.neighbors.iter().find(|nb| nb.index == i).unwrap().distance).collect();
        d.dedup();
        prop_assume!(d.len() == k);
        let rev: Vec<Vec<f32>> = data.iter().rev().cloned().collect();
        let rev_labels: Vec<usize> = labels.iter().rev().copied().collect();
        let rev_arr = Array2::from_shape_vec((n, 5), rev.concat()).unwrap();
        let again = EmbeddingIndex::build(rev_arr.view(), &rev_labels, k).unwrap().classify(&query).unwrap();
        prop_assert_eq!(again.label, got.label);
        prop_assert_eq!(again.scores, got.scores);
    }

    #[test]
    fn probability_vote_is_scale_invariant(tiles in prop::collection::vec(score_vec(), 1..50), exp in -20i32..20) {
        let sum = probability_vote("x", &tiles, Reduction::Sum).unwrap();
        let mean = probability_vote("x", &tiles, Reduction::Mean).unwrap();
        prop_assert_eq!(sum.predicted, mean.predicted);
        let c = 2f64.powi(exp);
        prop_assert_eq!(argmax_lowest(&sum.scores.map(|s| s * c)), sum.predicted);
    }

    #[test]
    fn unanimous_tiles_decide(class in 0usize..4, tiles in prop::collection::vec(score_vec(), 1..30)) {
        let votes: Vec<TileVote> = tiles.iter().map(|&scores| TileVote { label: class, scores }).collect();
        prop_assert_eq!(majority_vote("x", &votes).unwrap().predicted, class);
        let onehot = vec![TileScores::one_hot(class); tiles.len()];
        prop_assert_eq!(probability_vote("x", &onehot, Reduction::Sum).unwrap().predicted, class);
    }

    #[test]
    fn confusion_rows_count_the_truth(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..100)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = compute_metrics(&pred, &truth).unwrap();
        for c in 0..NUM_CLASSES {
            prop_assert_eq!(m.confusion[c].iter().sum::<usize>(), truth.iter().filter(|&&t| t == c).count());
        }
        let trace: usize = (0..NUM_CLASSES).map(|c| m.confusion[c][c]).sum();
        prop_assert!((m.accuracy - trace as f64 / truth.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn cam_maps_are_nonnegative_and_normalized(
        feats in prop::collection::vec(-2.0f64..2.0, 3 * 5 * 6),
        weights in prop::collection::vec(-1.0f64..1.0, 3),
        out in 6usize..40,
    ) {
        let f = Array3::from_shape_vec((3, 5, 6), feats).unwrap();
        let raw = weighted_relu_sum(f.view(), &weights);
        prop_assert!(raw.iter().all(|&v| v >= 0.0));
        for map in [normalize_map(&raw), normalize_map(&upsample_map(&raw, out, out))] {
            let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            if map.iter().all(|&v| v == 0.0) {
                continue;
            }
            prop_assert_eq!((lo, hi), (0.0, 1.0));
        }
    }

    #[test]
    fn early_stop_window_has_no_improvement(
        metrics in prop::collection::vec((0.0f64..3.0, 0.0f64..1.0), 1..60),
        patience in 1usize..8,
        max_epochs in 1usize..60,
    ) {
        let mut p = StoppingProtocol::new(patience);
        let mut saved_acc = Vec::new();
        let mut stopped_at = None;
        for (i, &(loss, acc)) in metrics.iter().take(max_epochs).enumerate() {
            let d = p.observe(i + 1, loss, acc);
            if d.save {
                saved_acc.push(acc);
            }
            if d.stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        let ran = stopped_at.unwrap_or(metrics.len().min(max_epochs));
        prop_assert!(ran <= max_epochs);
        let best = p.best().unwrap();
        // Accuracy improvements are always saved, so the best saved epoch
        // dominates every logged epoch.
        for &(_, acc) in &metrics[..ran] {
            prop_assert!(best.1 >= acc);
        }
        prop_assert!(saved_acc.iter().all(|&a| a <= best.1));
        if let Some(stop) = stopped_at {
            let (before, window) = metrics[..stop].split_at(stop - patience);
            let best_loss = before.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
            let best_acc = before.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(!before.is_empty());
            for &(loss, acc) in window {
                prop_assert!(loss >= best_loss && acc <= best_acc);
            }
        }
    }
}
