use poem_core::autodiff::finite_diff_check;
use poem_core::episodes::{Condition, Episode, EpisodeMeta};
use poem_core::gaussian::PriorSpec;
use poem_core::models::*;
use poem_core::rng::{mix, rng_from, standard_normal};

fn random_views(seed: u64, count: usize, width: usize) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed);
    (0..count).map(|_| (0..width).map(|_| standard_normal(&mut rng)).collect()).collect()
}

fn episode(seed: u64) -> Episode {
    let width = 7; let ways = 3; let q_per = 2;
    let mut support = Vec::new(); let mut queries = Vec::new(); let mut targets = Vec::new();
    let mut k = 0u64;
    for m in 0..ways {
        let v = [2,3][m % 2];
        support.push(random_views(mix(seed, k), v, width)); k += 1;
        for _ in 0..q_per { queries.extend(random_views(mix(seed, k), 1, width)); targets.push(m); k += 1; }
    }
    let shots = support.iter().map(|s: &Vec<Vec<f64>>| s.len()).collect();
    Episode { support, queries, targets, meta: EpisodeMeta { ways, shots, condition: Condition::Partial, episode_seed: seed } }
}

fn main() {
    let mut rows = Vec::new();
    for seed in 1..=30u64 {
        let mut enc = init_encoder(&EncoderConfig { input_width: 7, backbone_widths: vec![8,8,8], head_hidden: vec![8,8], embed_dim: 4 }, seed);
        for slot in 0..enc.set.len() {
            for v in enc.set.tensor_mut(slot).data_mut() { *v *= 2.0; }
        }
        let ep = episode(seed);
        let o1 = build_episode_objective(&enc, &ep, &PriorSpec::neglect(), PrecisionMode::Learned).unwrap();
        let w1 = finite_diff_check(&o1.graph, o1.loss, &o1.binding.nodes, &o1.bindings, 1e-5).unwrap();
        let o2 = build_episode_objective(&enc, &ep, &PriorSpec::gaussian(4), PrecisionMode::Learned).unwrap();
        let w2 = finite_diff_check(&o2.graph, o2.loss, &o2.binding.nodes, &o2.bindings, 1e-5).unwrap();
        rows.push((w1.max(w2), seed, w1, w2));
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for r in &rows[..8] { println!("seed {:2}: joint {:.3e} (neglect {:.3e}, gaussian {:.3e})", r.1, r.0, r.2, r.3); }
}
