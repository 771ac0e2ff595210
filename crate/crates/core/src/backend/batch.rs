//! Continuous batching: plan formation under both local policies, the linear
//! step-cost model, and step execution with recompute preemption.
//!
//! The same code drives the live backend and the predictor's forward
//! simulation, which is what makes predictions exact when lengths are known.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::memory::MemoryManager;
use super::BackendError;
use crate::types::{
    blocks_needed, CostModelParams, InstanceConfig, LocalPolicy, RequestId, SnapshotEntry,
};

/// A request's progress inside one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub id: RequestId,
    pub prompt_tokens: u64,
    /// Length the instance runs the sequence to. The live backend uses the
    /// true response length; the predictor uses the (corrected) estimate.
    pub output_tokens: u64,
    /// Length exported through snapshots.
    pub estimated_output_tokens: u64,
    pub prefill_progress: u64,
    pub decoded_tokens: u64,
    /// Admission order into the running batch; larger is newer.
    pub batch_order: u64,
    /// Prompt tokens processed over the sequence's lifetime, recomputes
    /// included.
    pub prefilled_total: u64,
    pub preemptions: u32,
    /// KV blocks held, mirroring the memory manager's record.
    pub(crate) blocks: u64,
}

impl Sequence {
    pub fn new(id: RequestId, prompt_tokens: u64, output_tokens: u64, estimated: u64) -> Self {
        Self {
            id,
            prompt_tokens,
            output_tokens,
            estimated_output_tokens: estimated,
            prefill_progress: 0,
            decoded_tokens: 0,
            batch_order: 0,
            prefilled_total: 0,
            preemptions: 0,
            blocks: 0,
        }
    }

    pub fn prefill_done(&self) -> bool {
        self.prefill_progress == self.prompt_tokens
    }

    pub fn decode_ready(&self) -> bool {
        self.prefill_done() && self.decoded_tokens < self.output_tokens
    }

    pub fn context_tokens(&self) -> u64 {
        self.prefill_progress + self.decoded_tokens
    }

    pub fn entry(&self) -> SnapshotEntry {
        SnapshotEntry {
            id: self.id,
            prompt_tokens: self.prompt_tokens,
            estimated_output_tokens: self.estimated_output_tokens,
            prefill_progress: self.prefill_progress,
            decoded_tokens: self.decoded_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillSegment {
    pub id: RequestId,
    pub chunk_tokens: u64,
}

/// Composition of one execution step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub decode_ids: Vec<RequestId>,
    pub prefill_segments: Vec<PrefillSegment>,
    pub total_prefill_tokens: u64,
    pub context_tokens: u64,
    /// How many segments at the tail of `prefill_segments` come from the
    /// head of the waiting queue (in queue order).
    pub admitted: usize,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.decode_ids.is_empty() && self.prefill_segments.is_empty()
    }

    pub fn is_pure_prefill(&self) -> bool {
        self.decode_ids.is_empty() && !self.prefill_segments.is_empty()
    }

    pub fn is_pure_decode(&self) -> bool {
        self.prefill_segments.is_empty() && !self.decode_ids.is_empty()
    }
}

/// Step execution time under the linear cost model.
pub fn batch_latency(plan: &BatchPlan, params: &CostModelParams) -> f64 {
    latency_for(
        plan.decode_ids.len() as u64,
        plan.total_prefill_tokens,
        plan.context_tokens,
        params,
    )
}

pub(crate) fn latency_for(
    decodes: u64,
    prefill_tokens: u64,
    context_tokens: u64,
    params: &CostModelParams,
) -> f64 {
    params.c0
        + params.c_prefill * prefill_tokens as f64
        + params.c_decode * decodes as f64
        + params.c_context * context_tokens as f64
}

/// Result of executing one plan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    /// The plan actually executed, after preemption victims were removed.
    pub plan: BatchPlan,
    pub duration: f64,
    pub completions: Vec<RequestId>,
    pub preemptions: Vec<RequestId>,
    /// Sequences that produced their first token in this step.
    pub first_tokens: Vec<RequestId>,
    /// Sequences that moved from the waiting queue into the batch.
    pub started: Vec<RequestId>,
    /// Finished sequences, in completion order.
    pub finished: Vec<Sequence>,
}

/// Mutable state of one instance's local scheduler.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceState {
    pub(crate) config: InstanceConfig,
    pub(crate) memory: MemoryManager,
    /// Ordered by `batch_order`, oldest first.
    pub(crate) running: Vec<Sequence>,
    pub(crate) waiting: VecDeque<Sequence>,
    pub(crate) next_batch_order: u64,
}

impl InstanceState {
    pub fn new(config: InstanceConfig) -> Self {
        let memory = MemoryManager::new(config.total_blocks, config.block_size);
        Self {
            config,
            memory,
            running: Vec::new(),
            waiting: VecDeque::new(),
            next_batch_order: 0,
        }
    }

    pub fn config(&self) -> &InstanceConfig {
        &self.config
    }

    pub fn memory(&self) -> &MemoryManager {
        &self.memory
    }

    pub fn running(&self) -> &[Sequence] {
        &self.running
    }

    pub fn waiting(&self) -> &VecDeque<Sequence> {
        &self.waiting
    }

    pub fn is_idle(&self) -> bool {
        self.running.is_empty() && self.waiting.is_empty()
    }

    pub fn fits(&self, prompt_tokens: u64, output_tokens: u64) -> bool {
        blocks_needed(prompt_tokens + output_tokens, self.config.block_size)
            <= self.config.total_blocks
    }

    /// Appends a sequence to the waiting-queue tail.
    pub fn admit(&mut self, seq: Sequence) -> Result<(), BackendError> {
        if !self.fits(seq.prompt_tokens, seq.output_tokens) {
            return Err(BackendError::RequestTooLarge {
                id: seq.id,
                blocks: blocks_needed(
                    seq.prompt_tokens + seq.output_tokens,
                    self.config.block_size,
                ),
                total_blocks: self.config.total_blocks,
            });
        }
        self.waiting.push_back(seq);
        Ok(())
    }

    /// Tokens a sequence will hold after processing `chunk` prompt tokens:
    /// completing the prompt also emits the first output token.
    fn tokens_after_chunk(seq: &Sequence, chunk: u64) -> u64 {
        let after = seq.prefill_progress + chunk;
        let first = u64::from(after == seq.prompt_tokens && seq.decoded_tokens == 0);
        after + seq.decoded_tokens + first
    }

    pub fn form_batch(&self) -> Result<BatchPlan, BackendError> {
        let plan = match self.config.local_policy {
            LocalPolicy::ChunkedPrefill => self.form_chunked(),
            LocalPolicy::PrefillPriority => self.form_prefill_priority(),
        };
        if plan.is_empty() {
            Err(BackendError::EmptyPlan)
        } else {
            Ok(plan)
        }
    }

    fn form_chunked(&self) -> BatchPlan {
        let budget = self.config.chunk_budget;
        let mut plan = BatchPlan {
            decode_ids: Vec::with_capacity(self.running.len()),
            ..BatchPlan::default()
        };
        let mut reserved = 0u64;

        for seq in self.running.iter().filter(|s| s.decode_ready()) {
            if plan.decode_ids.len() as u64 >= budget {
                break;
            }
            plan.decode_ids.push(seq.id);
            plan.context_tokens += seq.context_tokens();
            reserved += self.growth(seq, seq.context_tokens() + 1);
        }
        let mut remaining = budget - plan.decode_ids.len() as u64;

        for seq in self.running.iter().filter(|s| !s.prefill_done()) {
            if remaining == 0 {
                break;
            }
            let chunk = remaining.min(seq.prompt_tokens - seq.prefill_progress);
            reserved += self.growth(seq, Self::tokens_after_chunk(seq, chunk));
            plan.prefill_segments.push(PrefillSegment {
                id: seq.id,
                chunk_tokens: chunk,
            });
            plan.total_prefill_tokens += chunk;
            remaining -= chunk;
        }

        let mut batch = self.running.len();
        for seq in &self.waiting {
            if remaining == 0 || batch >= self.config.max_batch_size {
                break;
            }
            let chunk = remaining.min(seq.prompt_tokens - seq.prefill_progress);
            let need = blocks_needed(Self::tokens_after_chunk(seq, chunk), self.config.block_size);
            if reserved + need > self.memory.free_blocks() {
                break;
            }
            reserved += need;
            plan.prefill_segments.push(PrefillSegment {
                id: seq.id,
                chunk_tokens: chunk,
            });
            plan.total_prefill_tokens += chunk;
            plan.admitted += 1;
            batch += 1;
            remaining -= chunk;
        }
        plan
    }

    fn form_prefill_priority(&self) -> BatchPlan {
        let mut plan = BatchPlan::default();
        let mut reserved = 0u64;
        let mut batch = self.running.len();
        for seq in &self.waiting {
            if batch >= self.config.max_batch_size {
                break;
            }
            let chunk = seq.prompt_tokens - seq.prefill_progress;
            let need = blocks_needed(Self::tokens_after_chunk(seq, chunk), self.config.block_size);
            if reserved + need > self.memory.free_blocks() {
                break;
            }
            reserved += need;
            plan.prefill_segments.push(PrefillSegment {
                id: seq.id,
                chunk_tokens: chunk,
            });
            plan.total_prefill_tokens += chunk;
            plan.admitted += 1;
            batch += 1;
        }
        if plan.admitted > 0 {
            return plan;
        }
        for seq in self.running.iter().filter(|s| s.decode_ready()) {
            plan.decode_ids.push(seq.id);
            plan.context_tokens += seq.context_tokens();
        }
        plan
    }

    /// Extra blocks `seq` needs to hold `tokens` tokens.
    fn growth(&self, seq: &Sequence, tokens: u64) -> u64 {
        blocks_needed(tokens, self.config.block_size).saturating_sub(seq.blocks)
    }

    fn grow(&mut self, i: usize, tokens: u64) {
        let extra = self.growth(&self.running[i], tokens);
        if extra > 0 {
            let s = &mut self.running[i];
            let ok = self.memory.grow_by(s.id, extra);
            debug_assert!(ok);
            s.blocks += extra;
        }
        debug_assert_eq!(self.running[i].blocks, self.memory.held(self.running[i].id));
    }

    fn position(&self, id: RequestId) -> usize {
        self.running
            .iter()
            .position(|s| s.id == id)
            .expect("planned sequence is running")
    }

    /// Plan members appear in batch order, so the next one is usually right
    /// after the previous.
    fn position_from(&self, id: RequestId, hint: usize) -> usize {
        match self.running.get(hint) {
            Some(s) if s.id == id => hint,
            _ => self.position(id),
        }
    }

    fn positions<'a>(&'a self, ids: impl Iterator<Item = RequestId> + 'a) -> impl Iterator<Item = usize> + 'a {
        let mut hint = 0;
        ids.map(move |id| {
            let i = self.position_from(id, hint);
            hint = i + 1;
            i
        })
    }

    /// Blocks the plan must allocate before it can run.
    fn plan_growth(&self, plan: &BatchPlan) -> u64 {
        let decode: u64 = self
            .positions(plan.decode_ids.iter().copied())
            .map(|i| {
                let s = &self.running[i];
                self.growth(s, s.context_tokens() + 1)
            })
            .sum();
        let prefill: u64 = self
            .positions(plan.prefill_segments.iter().map(|seg| seg.id))
            .zip(&plan.prefill_segments)
            .map(|(i, seg)| {
                let s = &self.running[i];
                self.growth(s, Self::tokens_after_chunk(s, seg.chunk_tokens))
            })
            .sum();
        decode + prefill
    }

    fn preempt_newest(&mut self, plan: &mut BatchPlan) -> RequestId {
        let mut victim = self.running.pop().expect("non-empty batch");
        self.memory.release(victim.id);
        victim.blocks = 0;
        victim.prefill_progress = 0;
        victim.decoded_tokens = 0;
        victim.preemptions += 1;
        let id = victim.id;
        plan.decode_ids.retain(|&d| d != id);
        plan.prefill_segments.retain(|s| s.id != id);
        self.waiting.push_front(victim);
        id
    }

    fn recount(&self, plan: &mut BatchPlan) {
        plan.total_prefill_tokens = plan.prefill_segments.iter().map(|s| s.chunk_tokens).sum();
        plan.context_tokens = self
            .positions(plan.decode_ids.iter().copied())
            .map(|i| self.running[i].context_tokens())
            .sum();
    }

    pub fn execute_step(&mut self, plan: &BatchPlan) -> Result<StepOutcome, BackendError> {
        let params = self.config.cost_model;
        self.execute_step_with(plan, |p| batch_latency(p, &params))
    }

    /// Executes `plan`, timing the executed step with `latency`.
    ///
    /// Allocation happens up front. While it cannot be satisfied the newest
    /// batch member is preempted: its blocks are released, its progress is
    /// reset, and it returns to the head of the waiting queue.
    pub fn execute_step_with(
        &mut self,
        plan: &BatchPlan,
        latency: impl FnOnce(&BatchPlan) -> f64,
    ) -> Result<StepOutcome, BackendError> {
        if plan.is_empty() {
            return Err(BackendError::EmptyPlan);
        }
        let mut plan = plan.clone();
        let mut out = StepOutcome::default();

        for _ in 0..plan.admitted {
            let mut seq = self.waiting.pop_front().expect("admitted from waiting head");
            seq.batch_order = self.next_batch_order;
            self.next_batch_order += 1;
            out.started.push(seq.id);
            self.running.push(seq);
        }
        plan.admitted = 0;

        loop {
            let need = self.plan_growth(&plan);
            if need <= self.memory.free_blocks() {
                break;
            }
            if self.running.len() <= 1 {
                let id = self.running.first().map(|s| s.id).unwrap_or(RequestId(u64::MAX));
                return Err(BackendError::Deadlock { id });
            }
            let victim = self.preempt_newest(&mut plan);
            out.started.retain(|&s| s != victim);
            out.preemptions.push(victim);
        }
        self.recount(&mut plan);
        if plan.is_empty() {
            // every planned member was evicted; nothing runs this step
            return Err(BackendError::EmptyPlan);
        }

        let mut hint = 0;
        for &id in &plan.decode_ids {
            let i = self.position_from(id, hint);
            hint = i + 1;
            let tokens = self.running[i].context_tokens() + 1;
            self.grow(i, tokens);
            self.running[i].decoded_tokens += 1;
        }
        let mut hint = 0;
        for seg in &plan.prefill_segments {
            let i = self.position_from(seg.id, hint);
            hint = i + 1;
            let tokens = Self::tokens_after_chunk(&self.running[i], seg.chunk_tokens);
            self.grow(i, tokens);
            let s = &mut self.running[i];
            s.prefill_progress += seg.chunk_tokens;
            s.prefilled_total += seg.chunk_tokens;
            if s.prefill_done() && s.decoded_tokens == 0 {
                s.decoded_tokens = 1;
                out.first_tokens.push(s.id);
            }
        }

        if self
            .running
            .iter()
            .any(|s| s.prefill_done() && s.decoded_tokens >= s.output_tokens)
        {
            let mut kept = Vec::with_capacity(self.running.len());
            for seq in self.running.drain(..) {
                if seq.prefill_done() && seq.decoded_tokens >= seq.output_tokens {
                    out.completions.push(seq.id);
                    out.finished.push(seq);
                } else {
                    kept.push(seq);
                }
            }
            self.running = kept;
            for id in &out.completions {
                self.memory.release(*id);
            }
        }

        out.duration = latency(&plan);
        out.plan = plan;
        Ok(out)
    }

    /// Number of steps, starting with `plan`, that are guaranteed to be
    /// identical pure-decode steps over the whole batch: no completion, no
    /// preemption and no admission. Zero when `plan` is not such a step.
    ///
    /// Admission cannot reopen inside the stretch: a head that did not fit
    /// now sees fewer free blocks on every later step, because nothing is
    /// released until a completion.
    pub fn decode_stretch(&self, plan: &BatchPlan) -> u64 {
        if !plan.is_pure_decode() || plan.admitted > 0 || plan.decode_ids.len() != self.running.len() {
            return 0;
        }
        let Some(k) = self
            .running
            .iter()
            .map(|s| s.output_tokens.saturating_sub(s.decoded_tokens))
            .min()
        else {
            return 0;
        };
        // the step that completes someone goes through the normal path
        let mut k = k.saturating_sub(1);
        let free = self.memory.free_blocks();
        let growth = |k: u64| -> u64 {
            self.running
                .iter()
                .map(|s| self.growth(s, s.context_tokens() + k))
                .sum()
        };
        if growth(k) > free {
            let (mut lo, mut hi) = (0, k);
            while lo < hi {
                let mid = (lo + hi + 1) / 2;
                if growth(mid) <= free {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            k = lo;
        }
        k
    }

    /// Applies `steps` pure-decode steps to every running sequence. Only
    /// valid for `steps <= decode_stretch(plan)`.
    pub fn advance_decodes(&mut self, steps: u64) {
        for i in 0..self.running.len() {
            let tokens = self.running[i].context_tokens() + steps;
            self.grow(i, tokens);
            self.running[i].decoded_tokens += steps;
        }
    }

    /// Rebuilds scheduler state from status-API entries. Running entries keep
    /// their order as batch-admission order. Each entry runs to its
    /// `estimated_output_tokens`.
    pub fn from_entries(
        config: InstanceConfig,
        free_blocks: u64,
        running: &[SnapshotEntry],
        waiting: &[SnapshotEntry],
    ) -> Result<Self, BackendError> {
        let mut state = Self::new(config);
        for e in running {
            if e.prefill_progress > e.prompt_tokens {
                return Err(BackendError::InconsistentSnapshot(format!(
                    "request {} prefilled beyond its prompt",
                    e.id
                )));
            }
            let mut seq = Sequence::new(
                e.id,
                e.prompt_tokens,
                e.estimated_output_tokens,
                e.estimated_output_tokens,
            );
            seq.prefill_progress = e.prefill_progress;
            seq.decoded_tokens = e.decoded_tokens;
            seq.batch_order = state.next_batch_order;
            state.next_batch_order += 1;
            let blocks = blocks_needed(e.context_tokens(), state.config.block_size);
            if !state.memory.assign(e.id, blocks) {
                return Err(BackendError::InconsistentSnapshot(
                    "running requests hold more blocks than the instance has".into(),
                ));
            }
            seq.blocks = blocks;
            state.running.push(seq);
        }
        if state.memory.free_blocks() != free_blocks {
            return Err(BackendError::InconsistentSnapshot(format!(
                "free_blocks {} disagrees with {} implied by running requests",
                free_blocks,
                state.memory.free_blocks()
            )));
        }
        state.memory.set_free(free_blocks);
        for e in waiting {
            let mut seq = Sequence::new(
                e.id,
                e.prompt_tokens,
                e.estimated_output_tokens,
                e.estimated_output_tokens,
            );
            seq.prefill_progress = e.prefill_progress;
            seq.decoded_tokens = e.decoded_tokens;
            state.waiting.push_back(seq);
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::InstanceId;

    fn cfg(policy: LocalPolicy) -> InstanceConfig {
        InstanceConfig {
            local_policy: policy,
            ..InstanceConfig::default()
        }
    }

    fn seq(id: u64, prompt: u64, out: u64) -> Sequence {
        Sequence::new(RequestId(id), prompt, out, out)
    }

    /// Runs steps until `n` sequences decode.
    fn warm_decoders(state: &mut InstanceState, n: u64, prompt: u64, out: u64) {
        for i in 0..n {
            state.admit(seq(1000 + i, prompt, out)).unwrap();
        }
        while state.running.iter().filter(|s| s.decode_ready()).count() < n as usize {
            let plan = state.form_batch().unwrap();
            state.execute_step(&plan).unwrap();
        }
    }

    #[test]
    fn chunked_prefill_takes_a_full_budget_chunk() {
        let mut s = InstanceState::new(cfg(LocalPolicy::ChunkedPrefill));
        s.admit(seq(1, 1200, 10)).unwrap();
        let plan = s.form_batch().unwrap();
        assert!(plan.decode_ids.is_empty());
        assert_eq!(
            plan.prefill_segments,
            vec![PrefillSegment { id: RequestId(1), chunk_tokens: 512 }]
        );
    }

    #[test]
    fn chunked_prefill_shares_budget_with_decoders() {
        let mut s = InstanceState::new(cfg(LocalPolicy::ChunkedPrefill));
        warm_decoders(&mut s, 40, 8, 500);
        s.admit(seq(1, 1200, 10)).unwrap();
        let plan = s.form_batch().unwrap();
        assert_eq!(plan.decode_ids.len(), 40);
        assert_eq!(
            plan.prefill_segments,
            vec![PrefillSegment { id: RequestId(1), chunk_tokens: 472 }]
        );
        assert!(plan.decode_ids.len() as u64 + plan.total_prefill_tokens <= 512);
    }

    #[test]
    fn prefill_priority_stalls_decoders() {
        let mut s = InstanceState::new(cfg(LocalPolicy::PrefillPriority));
        warm_decoders(&mut s, 10, 8, 500);
        s.admit(seq(1, 300, 10)).unwrap();
        let plan = s.form_batch().unwrap();
        assert!(plan.is_pure_prefill());
        assert_eq!(plan.prefill_segments[0].id, RequestId(1));
        assert_eq!(plan.prefill_segments[0].chunk_tokens, 300);
    }

    #[test]
    fn latency_formula_examples() {
        let p = CostModelParams::default();
        let prefill = BatchPlan {
            prefill_segments: vec![PrefillSegment { id: RequestId(1), chunk_tokens: 512 }],
            total_prefill_tokens: 512,
            ..Default::default()
        };
        assert!((batch_latency(&prefill, &p) - 0.0612).abs() < 1e-12);
        let decode = BatchPlan {
            decode_ids: (0..48).map(RequestId).collect(),
            context_tokens: 4800,
            ..Default::default()
        };
        assert!((batch_latency(&decode, &p) - 0.05848).abs() < 1e-12);
        let mut bigger = decode.clone();
        bigger.prefill_segments.push(PrefillSegment { id: RequestId(99), chunk_tokens: 64 });
        bigger.total_prefill_tokens = 64;
        assert!(batch_latency(&bigger, &p) > batch_latency(&decode, &p));
    }

    #[test]
    fn empty_instance_has_no_plan() {
        let s = InstanceState::new(cfg(LocalPolicy::ChunkedPrefill));
        assert!(matches!(s.form_batch(), Err(BackendError::EmptyPlan)));
    }

    #[test]
    fn oversized_request_rejected() {
        let mut s = InstanceState::new(cfg(LocalPolicy::ChunkedPrefill));
        assert!(matches!(
            s.admit(seq(1, 20_000, 1)),
            Err(BackendError::RequestTooLarge { .. })
        ));
    }

    #[test]
    fn admission_is_fcfs() {
        let mut s = InstanceState::new(cfg(LocalPolicy::ChunkedPrefill));
        s.admit(seq(1, 10, 1)).unwrap();
        s.admit(seq(2, 10, 1)).unwrap();
        let ids: Vec<_> = s.waiting.iter().map(|q| q.id).collect();
        assert_eq!(ids, vec![RequestId(1), RequestId(2)]);
    }

    #[test]
    fn decode_allocates_on_boundary() {
        let mut s = InstanceState::new(InstanceConfig {
            total_blocks: 8,
            ..cfg(LocalPolicy::ChunkedPrefill)
        });
        // 15 prompt tokens + first token fill one block exactly
        s.admit(seq(1, 15, 5)).unwrap();
        let plan = s.form_batch().unwrap();
        s.execute_step(&plan).unwrap();
        assert_eq!(s.memory.held(RequestId(1)), 1);
        let free = s.memory.free_blocks();
        let plan = s.form_batch().unwrap();
        s.execute_step(&plan).unwrap();
        assert_eq!(s.memory.held(RequestId(1)), 2);
        assert_eq!(s.memory.free_blocks(), free - 1);
    }

    #[test]
    fn newest_member_is_preempted() {
        // three sequences each holding one full block, nothing spare
        let mut s = InstanceState::new(InstanceConfig {
            instance_id: InstanceId(0),
            total_blocks: 3,
            block_size: 4,
            chunk_budget: 64,
            ..cfg(LocalPolicy::ChunkedPrefill)
        });
        for id in 1..=3 {
            s.admit(seq(id, 3, 5)).unwrap();
        }
        let plan = s.form_batch().unwrap();
        let out = s.execute_step(&plan).unwrap();
        assert_eq!(out.started, vec![RequestId(1), RequestId(2), RequestId(3)]);
        assert_eq!(s.memory.free_blocks(), 0);
        // each decoder now needs a second block
        let plan = s.form_batch().unwrap();
        let out = s.execute_step(&plan).unwrap();
        assert_eq!(out.preemptions, vec![RequestId(3), RequestId(2)]);
        assert_eq!(out.plan.decode_ids, vec![RequestId(1)]);
        let order: Vec<_> = s.waiting.iter().map(|q| q.id).collect();
        assert_eq!(order, vec![RequestId(2), RequestId(3)]);
        let victim = &s.waiting[1];
        assert_eq!((victim.prefill_progress, victim.decoded_tokens), (0, 0));
        assert_eq!(victim.preemptions, 1);
        assert!(s.memory.is_conserved());
    }

    #[test]
    fn last_token_completes_and_releases() {
        let mut s = InstanceState::new(cfg(LocalPolicy::ChunkedPrefill));
        s.admit(seq(1, 20, 2)).unwrap();
        let plan = s.form_batch().unwrap();
        let out = s.execute_step(&plan).unwrap();
        assert_eq!(out.first_tokens, vec![RequestId(1)]);
        let plan = s.form_batch().unwrap();
        let out = s.execute_step(&plan).unwrap();
        assert_eq!(out.completions, vec![RequestId(1)]);
        assert_eq!(s.memory.free_blocks(), s.config.total_blocks);
        assert!(s.is_idle());
    }

    #[test]
    fn lone_request_that_cannot_grow_deadlocks() {
        let mut s = InstanceState::new(InstanceConfig {
            total_blocks: 2,
            block_size: 16,
            ..cfg(LocalPolicy::ChunkedPrefill)
        });
        // rebuilt from a snapshot whose estimate exceeds capacity
        let entry = SnapshotEntry {
            id: RequestId(1),
            prompt_tokens: 16,
            estimated_output_tokens: 40,
            prefill_progress: 16,
            decoded_tokens: 16,
        };
        s = InstanceState::from_entries(s.config.clone(), 0, &[entry], &[]).unwrap();
        let plan = s.form_batch().unwrap();
        assert!(matches!(s.execute_step(&plan), Err(BackendError::Deadlock { .. })));
    }

    #[test]
    fn decode_stretch_stops_before_first_completion() {
        let mut s = InstanceState::new(cfg(LocalPolicy::ChunkedPrefill));
        warm_decoders(&mut s, 3, 20, 30);
        s.admit(seq(1, 20, 5)).unwrap();
        let plan = s.form_batch().unwrap();
        assert_eq!(s.decode_stretch(&plan), 0);
        s.execute_step(&plan).unwrap();
        let plan = s.form_batch().unwrap();
        // the short request has 4 tokens to go; the fourth step completes it
        assert_eq!(s.decode_stretch(&plan), 3);
    }

    proptest::proptest! {
        #[test]
        fn decode_stretch_matches_single_steps(
            prefill_priority in proptest::bool::ANY,
            total_blocks in 8u64..80,
            max_batch in 1usize..12,
            lens in proptest::collection::vec((1u64..60, 1u64..80), 1..20),
            warmup in 0usize..40,
        ) {
            let policy = if prefill_priority { LocalPolicy::PrefillPriority } else { LocalPolicy::ChunkedPrefill };
            let mut s = InstanceState::new(InstanceConfig {
                total_blocks,
                block_size: 4,
                max_batch_size: max_batch,
                chunk_budget: 32,
                ..cfg(policy)
            });
            for (i, &(p, o)) in lens.iter().enumerate() {
                let _ = s.admit(seq(i as u64, p, o));
            }
            for _ in 0..warmup {
                let Ok(plan) = s.form_batch() else { break };
                if s.execute_step(&plan).is_err() {
                    return Ok(());
                }
            }
            let Ok(plan) = s.form_batch() else { return Ok(()) };
            let k = s.decode_stretch(&plan);
            let mut stepped = s.clone();
            for _ in 0..k {
                let p = stepped.form_batch().unwrap();
                proptest::prop_assert!(p.is_pure_decode());
                proptest::prop_assert_eq!(p.decode_ids.len(), stepped.running.len());
                proptest::prop_assert_eq!(p.admitted, 0);
                let out = stepped.execute_step(&p).unwrap();
                proptest::prop_assert!(out.completions.is_empty() && out.preemptions.is_empty());
            }
            s.advance_decodes(k);
            proptest::prop_assert_eq!(s, stepped);
        }
    }
}
