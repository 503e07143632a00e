use std::time::{Duration, Instant};

use tokplan::codec::{tokenize, TokenSequence, Vocabulary};
use tokplan::model::{build_prompt, forward_full, ModelConfig, Params};
use tokplan::rng::SeedTree;
use tokplan::runtime::{decode_action_block, prefill_prefix};
use tokplan::scene::{generate_scene, SceneConfig};

fn fastest(reps: usize, mut f: impl FnMut()) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn cached_decode_beats_full_pass_on_long_prompt() {
    let v = Vocabulary::default();
    let cfg = ModelConfig { patch_size: 4, ..ModelConfig::tiny(&v) };
    assert!(cfg.prompt_len() >= 256, "prompt length {}", cfg.prompt_len());
    let params = Params::init(&cfg, &mut SeedTree::new(3).rng()).unwrap();
    let scene = generate_scene(17, &SceneConfig::default(), &v).unwrap();
    let prompt = build_prompt(&scene, &params.config).unwrap();
    let cache = prefill_prefix(&prompt, &params).unwrap();
    let states = [TokenSequence::all_masked(&v), tokenize(&scene.expert, &v, true).unwrap()];

    for x in &states {
        let a = decode_action_block(&cache, x, &params).unwrap();
        let b = forward_full(&params, &prompt, x).unwrap().logits;
        assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    let cached = fastest(3, || {
        for x in &states {
            decode_action_block(&cache, x, &params).unwrap();
        }
    });
    let uncached = fastest(3, || {
        for x in &states {
            forward_full(&params, &prompt, x).unwrap();
        }
    });
    assert!(cached < uncached, "cached {cached:?} vs uncached {uncached:?}");
}
