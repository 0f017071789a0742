//! Text encoder golden output and the learned text-pruning order.

use std::path::PathBuf;

use elip_core::text::{tokenize, TextConfig, TextEncoder, Vocab};
use elip_core::text_prune::{plan_text_prune, TextPruneStrategy};
use elip_core::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CAPTION: &str = "A brown dog jumps over the small wooden fence, near a red car.";

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/text_encoding.json")
}

/// Set `ELIP_BLESS=1` to rewrite the golden file after an intended change.
#[test]
fn seeded_text_encoding_matches_golden() {
    let vocab = Vocab::builtin();
    let enc = TextEncoder::seeded(TextConfig::matching(vocab.len(), 16, 2, 4.0), 42).unwrap();
    let seq = tokenize(CAPTION, &vocab);
    let feats = enc.encode_text(&seq).unwrap();
    let current = serde_json::json!({
        "ids": seq.ids,
        "rows": feats.rows(),
        "cols": feats.cols(),
        "data": feats.data(),
    });
    let path = golden_path();
    if std::env::var_os("ELIP_BLESS").is_some() || !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&current).unwrap()).unwrap();
    }
    let golden: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(golden["ids"], current["ids"]);
    assert_eq!(golden["rows"], current["rows"]);
    let want = golden["data"].as_array().unwrap();
    assert_eq!(want.len(), feats.data().len());
    for (w, g) in want.iter().zip(feats.data()) {
        assert!((w.as_f64().unwrap() - g).abs() < 1e-12);
    }
}

#[test]
fn learned_prune_drops_lowest_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let t = rng.gen_range(1..=40);
        let d = rng.gen_range(1..=8);
        let n = t + 2;
        let levels = trial % 2 == 0;
        let feats = FeatureMatrix::new(
            n,
            d,
            (0..n * d)
                .map(|_| if levels { rng.gen_range(-1..=1) as f64 } else { rng.gen_range(-1.0..1.0) })
                .collect(),
        )
        .unwrap();
        let cls: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ratio = rng.gen_range(0.05..0.95);
        let kept = plan_text_prune(n, TextPruneStrategy::Learned, ratio, Some(&cls), Some(&feats), 0).unwrap();

        let drop = (ratio * t as f64 + 1e-9).floor() as usize;
        let score = |p: usize| feats.row(p).iter().zip(&cls).map(|(a, b)| a * b).sum::<f64>();
        let mut order: Vec<usize> = (1..=t).collect();
        order.sort_by(|&a, &b| score(a).partial_cmp(&score(b)).unwrap().then(a.cmp(&b)));
        let mut expect: Vec<usize> = std::iter::once(0).chain(order[drop..].iter().copied()).chain([n - 1]).collect();
        expect.sort();
        assert_eq!(kept, expect, "trial {trial}");
    }
}

#[test]
fn twenty_word_caption_keeps_fourteen_tokens() {
    let vocab = Vocab::builtin();
    let enc = TextEncoder::seeded(TextConfig::matching(vocab.len(), 16, 2, 4.0), 3).unwrap();
    let seq = tokenize("two children play with a yellow ball on the green grass near a big tree in the sunny park today", &vocab);
    assert_eq!(seq.content_len(), 20);
    let cls = vec![0.25; 16];
    for s in TextPruneStrategy::ALL {
        let p = enc.encode_text_pruned(&seq, s, 0.4, Some(&cls), 17).unwrap();
        assert_eq!(p.features.rows(), 14);
        assert_eq!(&p.layer_tokens[2..], &[14, 14]);
        assert_eq!((p.kept[0], *p.kept.last().unwrap()), (0, 21));
    }
}
