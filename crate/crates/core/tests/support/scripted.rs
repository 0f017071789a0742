//! Hand-unrolled reference for the pruned vision forward pass. It shares no
//! kernels with the library: every product, normalization and softmax is an
//! explicit loop over nested `Vec`s.

use elip_core::elip::{FusionConfig, PruneOptions, TokenOrigin};
use elip_core::vit::{ImageTensor, TransformerLayer, VisionEncoder, VitConfig};
use elip_core::PruneSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn layer_norm(x: &Rows, gamma: &[f64], beta: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

fn affine(x: &Rows, w: &elip_core::FeatureMatrix, b: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|o| b[o] + (0..w.rows()).map(|i| row[i] * w.get(i, o)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

/// One pre-norm layer; returns the output and the head-averaged CLS row
/// over non-CLS keys.
fn layer(x: &Rows, p: &TransformerLayer) -> (Rows, Vec<f64>) {
    let n = x.len();
    let d = x[0].len();
    let hd = d / p.num_heads;
    let normed = layer_norm(x, &p.ln1.gamma, &p.ln1.beta);
    let q = affine(&normed, &p.query.weight, &p.query.bias);
    let k = affine(&normed, &p.key.weight, &p.key.bias);
    let v = affine(&normed, &p.value.weight, &p.value.bias);
    let mut ctx = vec![vec![0.0; d]; n];
    let mut cls_row = vec![0.0; n];
    for h in 0..p.num_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                let a = exps[j] / z;
                if i == 0 {
                    cls_row[j] += a / p.num_heads as f64;
                }
                for c in cols.clone() {
                    ctx[i][c] += a * v[j][c];
                }
            }
        }
    }
    let attn_out = affine(&ctx, &p.out.weight, &p.out.bias);
    let x1: Rows = x.iter().zip(&attn_out).map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect()).collect();
    let hidden: Rows = affine(&layer_norm(&x1, &p.ln2.gamma, &p.ln2.beta), &p.fc1.weight, &p.fc1.bias)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let mlp = affine(&hidden, &p.fc2.weight, &p.fc2.bias);
    let x2 = x1.iter().zip(&mlp).map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect()).collect();
    (x2, cls_row[1..].to_vec())
}

fn fuse(x: &mut Rows, xt: &[f64], lambda: f64) {
    for (v, t) in x[0].iter_mut().zip(xt) {
        *v = lambda * *v + (1.0 - lambda) * t;
    }
}

/// Full-sort top-k, then attention-weighted merge of the rest.
fn prune(x: &Rows, xi: &[f64], keep: usize, origins: &mut Vec<String>, block: usize) -> (Rows, Vec<String>) {
    let mut order: Vec<usize> = (0..xi.len()).collect();
    order.sort_by(|&a, &b| xi[b].partial_cmp(&xi[a]).unwrap().then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort();
    let mut residual = order[keep..].to_vec();
    residual.sort();
    let total: f64 = residual.iter().map(|&j| xi[j]).sum();
    let mut merged = vec![0.0; x[0].len()];
    for &j in &residual {
        for (m, v) in merged.iter_mut().zip(&x[j + 1]) {
            *m += xi[j] / total * v;
        }
    }
    let mut out = vec![x[0].clone()];
    out.extend(kept.iter().map(|&j| x[j + 1].clone()));
    out.push(merged);
    let kept_names: Vec<String> = kept.iter().map(|&j| origins[j].clone()).collect();
    *origins = kept_names.clone();
    origins.push(format!("merged@{block}"));
    (out, kept_names)
}

fn max_diff(a: &Rows, b: &elip_core::FeatureMatrix) -> Result<f64, String> {
    if (a.len(), a[0].len()) != b.shape() {
        return Err(format!("script shape {}x{} vs encoder {:?}", a.len(), a[0].len(), b.shape()));
    }
    Ok(a.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (v - b.get(i, j)).abs()))
        .fold(0.0, f64::max))
}

/// Runs the encoder and the script side by side on seeded inputs at
/// `M² = 16`, `d = 8` and returns the largest deviation seen at any block
/// boundary, or a description of the first structural mismatch.
pub fn compare_with_script(weight_seed: u64, input_seed: u64, lambda: f64) -> Result<f64, String> {
    let cfg = VitConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 12,
        mlp_ratio: 4.0,
        block_layout: PruneSchedule::elip_default(),
    };
    let enc = VisionEncoder::seeded(cfg, weight_seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(input_seed);
    let img = ImageTensor::new(16, 16, (0..3 * 256).map(|_| rng.gen::<f64>()).collect()).map_err(|e| e.to_string())?;
    let xt: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let schedule = PruneSchedule::elip_default();

    // Encoder under test, capturing the output of the last layer of every block.
    let mut block_ends = Vec::new();
    let opts = PruneOptions {
        fusion: FusionConfig::new(lambda).map_err(|e| e.to_string())?,
        ..Default::default()
    };
    let (final_x, trace) = enc
        .encode_with_elip_observed(&img, &xt, &schedule, &opts, &mut |r| {
            if [1, 3, 9, 11].contains(&r.layer) {
                block_ends.push(r.output.clone());
            }
        })
        .map_err(|e| e.to_string())?;
    trace.validate().map_err(|e| e.to_string())?;
    if trace.token_counts() != [16, 12, 8] {
        return Err(format!("token counts {:?}", trace.token_counts()));
    }

    // Patch embedding, written out by hand.
    let mut x: Rows = vec![enc.cls_token.clone()];
    for gy in 0..4 {
        for gx in 0..4 {
            let mut patch = Vec::new();
            for c in 0..3 {
                for py in 0..4 {
                    for px in 0..4 {
                        patch.push(img.pixel(c, gy * 4 + py, gx * 4 + px));
                    }
                }
            }
            x.extend(affine(&vec![patch], &enc.patch_embed.weight, &enc.patch_embed.bias));
        }
    }
    for (i, row) in x.iter_mut().enumerate() {
        for (v, p) in row.iter_mut().zip(enc.pos_embed.row(i)) {
            *v += p;
        }
    }
    let mut origins: Vec<String> = (0..16).map(|i| i.to_string()).collect();
    let mut xi = Vec::new();
    let mut worst: f64 = 0.0;
    let names = |v: &[TokenOrigin]| v.iter().map(|o| o.to_string()).collect::<Vec<_>>();

    // Block 0 (layers 0-1) feeds the 0.9 prune: 16 patches -> 14 kept.
    fuse(&mut x, &xt, lambda);
    for l in 0..2 {
        (x, xi) = layer(&x, &enc.layers[l]);
    }
    worst = worst.max(max_diff(&x, &block_ends[0])?);
    let (nx, kept) = prune(&x, &xi, 14, &mut origins, 1);
    x = nx;
    if names(&trace.blocks[0].kept) != kept {
        return Err("block 1 kept set differs".into());
    }

    // Block 1 (layers 2-3) feeds the 0.65 prune: keep 10.
    fuse(&mut x, &xt, lambda);
    for l in 2..4 {
        (x, xi) = layer(&x, &enc.layers[l]);
    }
    worst = worst.max(max_diff(&x, &block_ends[1])?);
    let (nx, kept) = prune(&x, &xi, 10, &mut origins, 2);
    x = nx;
    if names(&trace.blocks[1].kept) != kept {
        return Err("block 2 kept set differs".into());
    }

    // Block 2 (layers 4-9) feeds the 0.4 prune: keep 6.
    fuse(&mut x, &xt, lambda);
    for l in 4..10 {
        (x, xi) = layer(&x, &enc.layers[l]);
    }
    worst = worst.max(max_diff(&x, &block_ends[2])?);
    let (nx, kept) = prune(&x, &xi, 6, &mut origins, 3);
    x = nx;
    if names(&trace.blocks[2].kept) != kept {
        return Err("block 3 kept set differs".into());
    }

    // Block 3 (layers 10-11): no further pruning, so no fusion.
    for l in 10..12 {
        (x, _) = layer(&x, &enc.layers[l]);
    }
    worst = worst.max(max_diff(&x, &block_ends[3])?);
    worst = worst.max(max_diff(&x, &final_x)?);
    Ok(worst)
}
