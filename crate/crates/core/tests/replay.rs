use latentdrive::replay::{ReplayBuffer, RewardMode, Transition};
use latentdrive_autodiff::seeded;
use proptest::prelude::*;

/// Observation byte 0 holds the episode id, byte 1 the step index.
fn fill(buf: &mut ReplayBuffer, lengths: &[usize]) {
    for (e, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            buf.append(Transition {
                obs: vec![e as u8, t as u8],
                prev_action: (t > 0).then_some(t % 9),
                reward: None,
                cont: t + 1 < len,
                first: t == 0,
            })
            .unwrap();
        }
    }
}

#[test]
fn start_offsets_are_uniform() {
    let mut buf = ReplayBuffer::new(1000, RewardMode::Forbidden);
    fill(&mut buf, &[10]);
    let draws = 10_000;
    let mut counts = [0usize; 6];
    for (ep, off) in buf.sample_positions(draws, 5, &mut seeded(30)).unwrap() {
        assert_eq!(ep, 0);
        counts[off] += 1;
    }
    let expected = draws as f64 / 6.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 5 degrees of freedom, p = 0.001.
    assert!(chi2 < 20.515, "chi2 {chi2:.2}, counts {counts:?}");
}

proptest! {
    #[test]
    fn samples_are_contiguous_within_one_episode(
        lengths in prop::collection::vec(1usize..30, 1..6),
        len in 1usize..12,
        seed in 0u64..1000,
    ) {
        let mut buf = ReplayBuffer::new(10_000, RewardMode::Forbidden);
        fill(&mut buf, &lengths);
        if !buf.can_sample(len) {
            prop_assert!(buf.sample(4, len, &mut seeded(seed)).is_err());
            return Ok(());
        }
        for seq in buf.sample(16, len, &mut seeded(seed)).unwrap() {
            prop_assert_eq!(seq.len(), len);
            let ep = seq[0].obs[0];
            for (i, t) in seq.iter().enumerate() {
                prop_assert_eq!(t.obs[0], ep);
                prop_assert_eq!(t.obs[1] as usize, seq[0].obs[1] as usize + i);
            }
            prop_assert!(seq[1..].iter().all(|t| !t.first));
        }
    }
}

#[test]
fn reward_free_buffers_reject_rewards() {
    let mut buf = ReplayBuffer::new(100, RewardMode::Forbidden);
    let t = Transition { obs: vec![0], prev_action: None, reward: Some(1.0), cont: true, first: true };
    assert!(buf.append(t).is_err());
    assert_eq!(buf.writes(), 0);
}
