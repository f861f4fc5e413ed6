use super::{Episode, RawSchedule, DAY_MINUTES, NO_REPEAT_ACTIVITIES};
use crate::error::{Error, Result};

/// Turns a trip-diary day into a contiguous home-based schedule.
///
/// Travel gaps are absorbed into the activity before them so that activity
/// start times are kept, the day is stretched to cover midnight to midnight,
/// and back-to-back home/work/education episodes are merged. Days that do not
/// start and end at home come back as [`Error::NonHomeBased`], which callers
/// treat as a filter rather than a failure.
pub fn preprocess(raw: &RawSchedule) -> Result<RawSchedule> {
    let bad = |reason: String| Error::InvalidSchedule {
        pid: raw.pid.clone(),
        reason,
    };
    if raw.episodes.is_empty() {
        return Err(bad("no episodes".into()));
    }
    let mut eps: Vec<Episode> = raw.episodes.clone();
    for w in eps.windows(2) {
        if w[1].start < w[0].end {
            return Err(bad(format!("episodes overlap at minute {}", w[1].start)));
        }
    }
    eps[0].start = 0;
    for i in 0..eps.len() - 1 {
        eps[i].end = eps[i + 1].start;
    }
    let last = eps.len() - 1;
    if eps[last].end > DAY_MINUTES {
        return Err(bad(format!("day runs past midnight ({})", eps[last].end)));
    }
    eps[last].end = DAY_MINUTES;
    if let Some(i) = eps.iter().position(|e| e.end <= e.start) {
        return Err(bad(format!("episode {i} has non-positive duration")));
    }

    let mut merged: Vec<Episode> = Vec::with_capacity(eps.len());
    for ep in eps {
        match merged.last_mut() {
            Some(prev) if prev.act == ep.act && NO_REPEAT_ACTIVITIES.contains(&ep.act.as_str()) => {
                prev.end = ep.end;
            }
            _ => merged.push(ep),
        }
    }
    let out = RawSchedule::new(raw.pid.clone(), merged);
    if !out.is_home_based() {
        return Err(Error::NonHomeBased(raw.pid.clone()));
    }
    debug_assert!(out.validate().is_ok());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trips_extend_prior_activity() {
        let raw = RawSchedule::from_triples("p", &[("home", 0, 480), ("work", 540, 1020), ("home", 1080, 1440)]);
        let out = preprocess(&raw).unwrap();
        assert_eq!(
            out,
            RawSchedule::from_triples("p", &[("home", 0, 540), ("work", 540, 1080), ("home", 1080, 1440)])
        );
    }

    #[test]
    fn merges_then_rejects_non_home_based() {
        let raw = RawSchedule::from_triples("p", &[("home", 0, 400), ("home", 400, 900), ("work", 900, 1440)]);
        assert!(matches!(preprocess(&raw), Err(Error::NonHomeBased(_))));
    }

    #[test]
    fn merges_repeated_home() {
        let raw = RawSchedule::from_triples("p", &[("home", 0, 720), ("home", 720, 1440)]);
        assert_eq!(preprocess(&raw).unwrap(), RawSchedule::from_triples("p", &[("home", 0, 1440)]));
    }

    #[test]
    fn does_not_merge_repeated_shop() {
        let raw = RawSchedule::from_triples(
            "p",
            &[("home", 0, 600), ("shop", 600, 660), ("shop", 660, 700), ("home", 700, 1440)],
        );
        assert_eq!(preprocess(&raw).unwrap().episodes.len(), 4);
    }

    #[test]
    fn rejects_overlap() {
        let raw = RawSchedule::from_triples("p", &[("home", 0, 600), ("work", 500, 1440)]);
        assert!(matches!(preprocess(&raw), Err(Error::InvalidSchedule { .. })));
    }

    proptest! {
        #[test]
        fn output_is_feasible(
            cuts in proptest::collection::btree_set(1u32..1439, 1..12),
            acts in proptest::collection::vec(0usize..4, 13),
        ) {
            let names = ["home", "work", "education", "shop"];
            let mut bounds = vec![0];
            bounds.extend(cuts);
            bounds.push(1440);
            let mut eps: Vec<Episode> = bounds
                .windows(2)
                .zip(&acts)
                .map(|(w, &a)| Episode::new(names[a], w[0], w[1]))
                .collect();
            eps[0].act = "home".into();
            let n = eps.len();
            eps[n - 1].act = "home".into();
            let out = preprocess(&RawSchedule::new("p", eps)).unwrap();
            prop_assert!(out.validate().is_ok());
            prop_assert!(out.is_home_based());
            for w in out.episodes.windows(2) {
                prop_assert!(!(w[0].act == w[1].act && NO_REPEAT_ACTIVITIES.contains(&w[0].act.as_str())));
            }
        }
    }
}
