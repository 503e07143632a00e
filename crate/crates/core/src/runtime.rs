//! Decoding runtime: a prompt-span key/value cache shared by goal proposal,
//! drafting and editing, and the select/rank/commit token update.

use std::cmp::Ordering;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::codec::{Axis, TokenSequence, Vocabulary, BLOCK_LEN, GOAL_POSITIONS};
use crate::error::{Error, Result};
use crate::model::{forward_action, forward_prompt, ActionLogits, GoalLogits, Params, PromptInput, PromptKv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CacheState {
    Single,
    /// One stored prefix broadcast to this many decoding branches.
    Batch(usize),
}

/// Prompt keys and values for every layer, plus the goal logits produced by
/// the same pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixCache {
    kv: PromptKv,
    goal: GoalLogits,
    boundary: usize,
    state: CacheState,
    version: u64,
}

impl PrefixCache {
    pub fn goal(&self) -> &GoalLogits {
        &self.goal
    }

    pub fn kv(&self) -> &PromptKv {
        &self.kv
    }

    /// Index of the first action position; every cached row lies before it.
    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn state(&self) -> CacheState {
        self.state
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_state(&mut self, state: CacheState) {
        self.state = state;
    }

    pub fn check(&self, params: &Params) -> Result<()> {
        if self.version != params.version {
            return Err(Error::StaleCache { cache: self.version, params: params.version });
        }
        Ok(())
    }

    /// Rows held per layer; always equals the boundary.
    pub fn rows(&self) -> usize {
        self.kv.rows()
    }
}

/// One pass over the prompt, producing the cache and the goal logits.
pub fn prefill_prefix(prompt: &PromptInput, params: &Params) -> Result<PrefixCache> {
    let pass = forward_prompt(params, prompt)?;
    Ok(PrefixCache { boundary: pass.kv.rows(), kv: pass.kv, goal: pass.goal, state: CacheState::Single, version: params.version })
}

/// Recomputes the action block against the cached prefix. The cache is only
/// read, so the next call starts from the same boundary.
pub fn decode_action_block(cache: &PrefixCache, x: &TokenSequence, params: &Params) -> Result<ActionLogits> {
    cache.check(params)?;
    Ok(forward_action(params, &cache.kv, x)?.logits)
}

/// Decodes several branches against one stored prefix.
pub fn decode_batch(cache: &mut PrefixCache, xs: &[TokenSequence], params: &Params) -> Result<Vec<ActionLogits>> {
    cache.check(params)?;
    let prev = cache.state;
    cache.state = CacheState::Batch(xs.len());
    let out = xs.iter().map(|x| Ok(forward_action(params, &cache.kv, x)?.logits)).collect();
    cache.state = prev;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommitMode {
    /// Unmask the most confident masked positions.
    Draft,
    /// Rewrite the non-goal positions whose current token is least likely.
    Edit,
}

/// Max, argmax (lowest index on ties) and probabilities of the argmax and of
/// `current`, from one sequential pass.
#[derive(Debug, Clone, Copy)]
struct RowStats {
    argmax: usize,
    p_argmax: f64,
    p_current: f64,
}

fn row_stats(row: ArrayView1<f64>, current: Option<usize>) -> RowStats {
    let mut max = f64::NEG_INFINITY;
    let mut argmax = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > max {
            max = v;
            argmax = i;
        }
    }
    let mut sum = 0.0;
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    let p_current = current.map_or(0.0, |c| (row[c] - max).exp() / sum);
    RowStats { argmax, p_argmax: 1.0 / sum, p_current }
}

/// Ranking key: higher is selected first. Draft ranks by argmax probability,
/// edit by the improbability of the current token.
fn score(logits: &ActionLogits, x: &TokenSequence, pos: usize, mode: CommitMode, vocab: &Vocabulary) -> (f64, usize) {
    let axis = Axis::of_position(pos);
    let current = match mode {
        CommitMode::Draft => None,
        CommitMode::Edit => vocab.bin_of(axis, x.0[pos]),
    };
    let st = row_stats(logits.row(pos), current);
    let key = match mode {
        CommitMode::Draft => st.p_argmax,
        CommitMode::Edit => -st.p_current,
    };
    (key, st.argmax)
}

fn eligible(x: &TokenSequence, pos: usize, mode: CommitMode, vocab: &Vocabulary) -> bool {
    match mode {
        CommitMode::Draft => x.is_masked(pos, vocab),
        CommitMode::Edit => !GOAL_POSITIONS.contains(&pos),
    }
}

fn check_commit(x: &TokenSequence, n_commit: usize, mode: CommitMode, vocab: &Vocabulary) -> Result<()> {
    x.validate(vocab)?;
    if mode == CommitMode::Edit {
        if let Some(p) = (0..BLOCK_LEN).find(|&p| x.is_masked(p, vocab)) {
            return Err(Error::IncompleteSequence(p));
        }
    }
    let n = (0..BLOCK_LEN).filter(|&p| eligible(x, p, mode, vocab)).count();
    if n_commit > n {
        return Err(Error::Contract(format!("cannot commit {n_commit} positions, only {n} eligible in {mode:?} mode")));
    }
    Ok(())
}

fn ranks_before(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Single pass over the block keeping a fixed-size running selection; no
/// heap allocation.
pub fn fused_select_commit(logits: &ActionLogits, x: &TokenSequence, n_commit: usize, mode: CommitMode, vocab: &Vocabulary) -> Result<TokenSequence> {
    check_commit(x, n_commit, mode, vocab)?;
    // (key, position, argmax bin), kept sorted best-first.
    let mut top = [(0.0f64, 0usize, 0usize); BLOCK_LEN];
    let mut len = 0;
    if n_commit > 0 {
        for pos in 0..BLOCK_LEN {
            if !eligible(x, pos, mode, vocab) {
                continue;
            }
            let (key, bin) = score(logits, x, pos, mode, vocab);
            if len == n_commit && !ranks_before((key, pos), (top[len - 1].0, top[len - 1].1)) {
                continue;
            }
            let mut i = if len < n_commit {
                len += 1;
                len - 1
            } else {
                n_commit - 1
            };
            while i > 0 && ranks_before((key, pos), (top[i - 1].0, top[i - 1].1)) {
                top[i] = top[i - 1];
                i -= 1;
            }
            top[i] = (key, pos, bin);
        }
    }
    let mut out = *x;
    for &(_, pos, bin) in &top[..len] {
        out.0[pos] = vocab.token(Axis::of_position(pos), bin);
    }
    Ok(out)
}

/// Score every eligible position, sort, then write: the unfused path.
pub fn reference_select_commit(logits: &ActionLogits, x: &TokenSequence, n_commit: usize, mode: CommitMode, vocab: &Vocabulary) -> Result<TokenSequence> {
    check_commit(x, n_commit, mode, vocab)?;
    let mut scored: Vec<(f64, usize, usize)> =
        (0..BLOCK_LEN).filter(|&p| eligible(x, p, mode, vocab)).map(|p| {
            let (key, bin) = score(logits, x, p, mode, vocab);
            (key, p, bin)
        }).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut out = *x;
    for &(_, pos, bin) in scored.iter().take(n_commit) {
        out.0[pos] = vocab.token(Axis::of_position(pos), bin);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Vocabulary;
    use crate::model::{build_prompt, forward_full, ModelConfig};
    use crate::rng::SeedTree;
    use crate::scene::{generate_scene, SceneConfig};
    use rand::Rng;

    fn small_vocab() -> Vocabulary {
        Vocabulary::new((0.0, 8.0), (-4.0, 4.0), 16, 16).unwrap()
    }

    fn random_state(rng: &mut crate::rng::Rng, vocab: &Vocabulary, mask_prob: f64) -> TokenSequence {
        let mut x = TokenSequence::all_masked(vocab);
        for pos in 0..BLOCK_LEN {
            if !rng.gen_bool(mask_prob) {
                let axis = Axis::of_position(pos);
                x.0[pos] = vocab.token(axis, rng.gen_range(0..vocab.bins(axis)));
            }
        }
        x
    }

    // Quarter-step logits so ties occur often but distinct values never round
    // together.
    fn tied_logits(rng: &mut crate::rng::Rng, vocab: &Vocabulary) -> ActionLogits {
        let mut l = ActionLogits::zeros(vocab.bins_x, vocab.bins_y);
        l.x.mapv_inplace(|_| rng.gen_range(-4..=4) as f64 / 4.0);
        l.y.mapv_inplace(|_| rng.gen_range(-4..=4) as f64 / 4.0);
        if rng.gen_bool(0.3) {
            let r = l.x.row(0).to_owned();
            l.x.row_mut(3).assign(&r);
        }
        l
    }

    #[test]
    fn fused_matches_reference() {
        let vocab = small_vocab();
        let mut rng = SeedTree::new(17).rng();
        let mut cases = 0;
        while cases < 10_000 {
            let logits = tied_logits(&mut rng, &vocab);
            let mode = if cases % 2 == 0 { CommitMode::Draft } else { CommitMode::Edit };
            let x = random_state(&mut rng, &vocab, if mode == CommitMode::Draft { 0.6 } else { 0.0 });
            let n_eligible = (0..BLOCK_LEN).filter(|&p| eligible(&x, p, mode, &vocab)).count();
            let n = rng.gen_range(0..=n_eligible);
            let a = fused_select_commit(&logits, &x, n, mode, &vocab).unwrap();
            let b = reference_select_commit(&logits, &x, n, mode, &vocab).unwrap();
            assert_eq!(a, b);
            cases += 1;
        }
    }

    #[test]
    fn commit_contracts() {
        let vocab = small_vocab();
        let mut rng = SeedTree::new(3).rng();
        for _ in 0..200 {
            let logits = tied_logits(&mut rng, &vocab);
            let x = random_state(&mut rng, &vocab, 0.5);
            let m = x.mask_count(&vocab);
            assert_eq!(fused_select_commit(&logits, &x, 0, CommitMode::Draft, &vocab).unwrap(), x);
            let y = fused_select_commit(&logits, &x, m, CommitMode::Draft, &vocab).unwrap();
            assert_eq!(y.mask_count(&vocab), 0);
            for p in 0..BLOCK_LEN {
                if !x.is_masked(p, &vocab) {
                    assert_eq!(x.0[p], y.0[p]);
                }
            }
            assert!(matches!(fused_select_commit(&logits, &x, m + 1, CommitMode::Draft, &vocab), Err(Error::Contract(_))));
            let e = fused_select_commit(&logits, &y, 14, CommitMode::Edit, &vocab).unwrap();
            assert_eq!(e.goal(), y.goal());
        }
        let masked = TokenSequence::all_masked(&vocab);
        assert!(matches!(
            fused_select_commit(&ActionLogits::zeros(16, 16), &masked, 1, CommitMode::Edit, &vocab),
            Err(Error::IncompleteSequence(0))
        ));
    }

    #[test]
    fn edit_targets_least_likely_current_tokens() {
        let vocab = small_vocab();
        let mut logits = ActionLogits::zeros(16, 16);
        let mut x = TokenSequence::all_masked(&vocab);
        for pos in 0..BLOCK_LEN {
            x.0[pos] = vocab.token(Axis::of_position(pos), 0);
            logits.row_mut(pos)[0] = 5.0;
            logits.row_mut(pos)[7] = 3.0;
        }
        logits.row_mut(5)[0] = -5.0;
        logits.row_mut(14)[0] = -9.0;
        let out = fused_select_commit(&logits, &x, 1, CommitMode::Edit, &vocab).unwrap();
        assert_eq!(out.0[5], vocab.token(Axis::Y, 7));
        assert_eq!(out.0[14], x.0[14]);
    }

    fn fixture() -> (Params, PromptInput, Vocabulary) {
        let vocab = Vocabulary::default();
        let params = Params::init(&ModelConfig::tiny(&vocab), &mut SeedTree::new(2).rng()).unwrap();
        let scene = generate_scene(4, &SceneConfig::default(), &vocab).unwrap();
        let prompt = build_prompt(&scene, &params.config).unwrap();
        (params, prompt, vocab)
    }

    #[test]
    fn cache_reuse_and_staleness() {
        let (mut params, prompt, vocab) = fixture();
        let a = prefill_prefix(&prompt, &params).unwrap();
        let b = prefill_prefix(&prompt, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows(), a.boundary());
        assert_eq!(a.boundary(), params.config.prompt_len());
        assert_eq!(a.goal(), &crate::model::goal_logits(&params, &prompt).unwrap());

        let mut rng = SeedTree::new(5).rng();
        let x = random_state(&mut rng, &vocab, 0.5);
        let before = a.clone();
        let l1 = decode_action_block(&a, &x, &params).unwrap();
        let mut y = x;
        y.0[3] = vocab.token(Axis::Y, 1);
        decode_action_block(&a, &y, &params).unwrap();
        assert_eq!(a, before);
        assert_eq!(decode_action_block(&a, &x, &params).unwrap(), l1);
        let full = forward_full(&params, &prompt, &x).unwrap();
        assert!(full.logits.max_abs_diff(&l1) < 1e-5);

        let mut c = a.clone();
        let batch = decode_batch(&mut c, &[x, y], &params).unwrap();
        assert_eq!(batch[0], l1);
        assert_eq!(c.state(), CacheState::Single);

        params.bump();
        assert!(matches!(decode_action_block(&a, &x, &params), Err(Error::StaleCache { cache: 0, params: 1 })));
    }
}
