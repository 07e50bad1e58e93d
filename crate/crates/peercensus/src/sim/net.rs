//! Simulated point-to-point transport: every message between online peers
//! is delivered after a finite sampled delay; order across messages is not
//! preserved unless delays are constant. Messages addressed to offline
//! peers are dropped — those peers rejoin through sync and a join round.

use super::config::DelayModel;
use crate::identity::PeerId;
use rand::Rng;
use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Sample a delivery delay in ticks.
pub fn sample_delay(model: &DelayModel, rng: &mut impl Rng) -> u64 {
    match model {
        DelayModel::Fixed { ticks } => *ticks,
        DelayModel::Uniform { min, max } => rng.gen_range(*min..=*max),
        DelayModel::Exponential { mean } => {
            if *mean <= 0.0 {
                0
            } else {
                let u: f64 = rng.gen::<f64>();
                (-mean * (1.0 - u).ln()).ceil() as u64
            }
        }
    }
}

/// A scheduled message. The unique sequence number makes equal-tick
/// deliveries a total order, so runs are reproducible; ordering ignores the
/// payload entirely.
#[derive(Clone, Debug)]
struct Scheduled<M> {
    due: u64,
    seq: u64,
    to: PeerId,
    msg: M,
}

impl<M> PartialEq for Scheduled<M> {
    fn eq(&self, other: &Self) -> bool {
        self.due == other.due && self.seq == other.seq
    }
}
impl<M> Eq for Scheduled<M> {}
impl<M> PartialOrd for Scheduled<M> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<M> Ord for Scheduled<M> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due, self.seq).cmp(&(other.due, other.seq))
    }
}

/// Delay-ordered message queue.
#[derive(Debug)]
pub struct MessageQueue<M> {
    heap: BinaryHeap<Reverse<Scheduled<M>>>,
    next_seq: u64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped_offline: u64,
}

impl<M> Default for MessageQueue<M> {
    fn default() -> Self {
        MessageQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
            sent: 0,
            delivered: 0,
            dropped_offline: 0,
        }
    }
}

impl<M> MessageQueue<M> {
    /// Schedule `msg` for delivery to `to` after a sampled delay.
    pub fn deliver(
        &mut self,
        now: u64,
        to: PeerId,
        msg: M,
        model: &DelayModel,
        rng: &mut impl Rng,
    ) {
        let due = now + sample_delay(model, rng);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.sent += 1;
        self.heap.push(Reverse(Scheduled { due, seq, to, msg }));
    }

    /// Pop the next message due at or before `now`. The caller reports
    /// whether the recipient was online; offline recipients lose the
    /// message.
    pub fn pop_due(&mut self, now: u64) -> Option<(PeerId, M)> {
        match self.heap.peek() {
            Some(Reverse(s)) if s.due <= now => {
                let Reverse(s) = self.heap.pop().expect("peeked");
                self.delivered += 1;
                Some((s.to, s.msg))
            }
            _ => None,
        }
    }

    pub fn note_dropped(&mut self) {
        self.delivered -= 1;
        self.dropped_offline += 1;
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn pid(b: u8) -> PeerId {
        PeerId([b; 32])
    }

    #[test]
    fn zero_delay_is_fifo_per_link() {
        let mut rng = ChaCha12Rng::seed_from_u64(90);
        let mut q: MessageQueue<u64> = MessageQueue::default();
        let model = DelayModel::Fixed { ticks: 0 };
        for i in 0..100 {
            q.deliver(5, pid(1), i, &model, &mut rng);
        }
        let mut got = Vec::new();
        while let Some((_, m)) = q.pop_due(5) {
            got.push(m);
        }
        assert_eq!(got, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn longer_delay_is_overtaken() {
        let mut rng = ChaCha12Rng::seed_from_u64(91);
        let mut q: MessageQueue<&'static str> = MessageQueue::default();
        q.deliver(0, pid(1), "slow", &DelayModel::Fixed { ticks: 5 }, &mut rng);
        q.deliver(0, pid(1), "fast", &DelayModel::Fixed { ticks: 3 }, &mut rng);
        assert!(q.pop_due(2).is_none());
        assert_eq!(q.pop_due(3), Some((pid(1), "fast")));
        assert!(q.pop_due(4).is_none());
        assert_eq!(q.pop_due(5), Some((pid(1), "slow")));
    }

    #[test]
    fn nothing_is_lost_between_online_peers() {
        let mut rng = ChaCha12Rng::seed_from_u64(92);
        let mut q: MessageQueue<u64> = MessageQueue::default();
        let model = DelayModel::Uniform { min: 0, max: 9 };
        let n = 100_000u64;
        for i in 0..n {
            q.deliver(i / 64, pid((i % 7) as u8), i, &model, &mut rng);
        }
        let mut seen = vec![false; n as usize];
        let mut tick = 0u64;
        while !q.is_empty() {
            while let Some((_, m)) = q.pop_due(tick) {
                assert!(!seen[m as usize], "duplicate {m}");
                seen[m as usize] = true;
            }
            tick += 1;
        }
        assert!(seen.iter().all(|s| *s));
        assert_eq!(q.sent, n);
        assert_eq!(q.delivered, n);
    }

    #[test]
    fn exponential_delay_mean_is_close() {
        let mut rng = ChaCha12Rng::seed_from_u64(93);
        let model = DelayModel::Exponential { mean: 8.0 };
        let n = 100_000;
        let total: u64 = (0..n).map(|_| sample_delay(&model, &mut rng)).sum();
        let mean = total as f64 / n as f64;
        // ceil() biases up by about half a tick
        assert!((mean - 8.5).abs() < 0.25, "mean {mean}");
    }
}
