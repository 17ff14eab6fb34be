mod common;

use std::collections::BTreeMap;

use proptest::collection::vec;
use proptest::prelude::*;

use common::*;
use sensefs::devicefs::format_values;
use sensefs::simnet::{DutyCycle, EndpointId};
use sensefs::views::{cell_label, plan_query, Band, Candidate, FileService, Namespace, NsError, NsResult, Target};
use sensefs::wire::{decode_message, encode_message, Body, FrameReader, Message, Stat, IOUNIT, MAX_FRAME};

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn roundtrip_and_size_field(m in arb_message()) {
        let bytes = encode_message(&m).unwrap();
        prop_assert!(bytes.len() <= MAX_FRAME);
        prop_assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len());
        prop_assert_eq!(decode_message(&bytes).unwrap(), m);
    }

    #[test]
    fn truncated_frames_never_decode(m in arb_message(), cut in any::<usize>()) {
        let bytes = encode_message(&m).unwrap();
        let k = cut % bytes.len();
        prop_assert!(decode_message(&bytes[..k]).is_err());
    }

    #[test]
    fn partial_stream_leaves_reader_unfinished(m in arb_message(), cut in any::<usize>()) {
        let bytes = encode_message(&m).unwrap();
        let k = 1 + cut % (bytes.len() - 1);
        let mut r = FrameReader::new();
        r.push(&bytes[..k]);
        prop_assert_eq!(r.next_frame().unwrap(), None);
        prop_assert!(r.finish().is_err());
        r.push(&bytes[k..]);
        prop_assert_eq!(r.next_frame().unwrap(), Some(bytes.clone()));
        prop_assert!(r.finish().is_ok());
    }

    #[test]
    fn oversized_payloads_are_refused(extra in 1usize..64, tag in 0u16..100) {
        // Full IOUNIT payloads fit in both directions; one frame is the hard cap.
        let fits = vec![7u8; IOUNIT as usize];
        let read = encode_message(&Message::new(tag, Body::Rread { data: fits.clone() }));
        let write = encode_message(&Message::new(tag, Body::Twrite { fid: 1, offset: 0, data: fits }));
        prop_assert!(read.is_ok());
        prop_assert_eq!(write.map(|b| b.len()).ok(), Some(MAX_FRAME));

        let read = encode_message(&Message::new(tag, Body::Rread { data: vec![7u8; MAX_FRAME - 11 + extra] }));
        let write = encode_message(&Message::new(tag, Body::Twrite { fid: 1, offset: 0, data: vec![7u8; IOUNIT as usize + extra] }));
        prop_assert!(read.is_err());
        prop_assert!(write.is_err());
    }

    #[test]
    fn duty_cycle_counts_match_tick_by_tick(on in 1u64..20, off in 0u64..20, phase in 0u64..50, from in 0u64..300, len in 0u64..300) {
        let d = DutyCycle::new(on, off, phase).unwrap();
        let to = from + len;
        let oracle = awake_ticks_oracle(Some((on, off, phase)), to) - awake_ticks_oracle(Some((on, off, phase)), from);
        prop_assert_eq!(d.on_ticks_between(from, to), oracle);
        prop_assert_eq!(d.on_ticks_between(0, to), (0..to).filter(|&t| d.is_on(t)).count() as u64);
    }

    #[test]
    fn readings_parse_back_exactly(values in vec(-1e6f64..1e6, 1..4)) {
        let text = format_values(&values);
        prop_assert!(text.ends_with('\n'));
        prop_assert_eq!(parse_floats(&text), values);
    }

    #[test]
    fn cell_labels_floor_toward_zero(tenths in -1800i64..1800, cell_tenths in prop::sample::select(vec![5i64, 10, 20, 50])) {
        let deg = tenths as f64 / 10.0;
        let label = cell_label(deg, cell_tenths as f64 / 10.0, 'E', 'W');
        let (num, hemi) = label.split_at(label.len() - 1);
        let base_tenths = (tenths.abs() / cell_tenths) * cell_tenths;
        let got: f64 = num.parse().unwrap();
        prop_assert!((got * 10.0 - base_tenths as f64).abs() < 1e-9, "{label} for {deg}");
        prop_assert_eq!(hemi, if tenths < 0 { "W" } else { "E" });
    }

    #[test]
    fn bands_are_monotone(a in 0.0f64..200.0, b in 0.0f64..200.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(Band::of(Some(lo), 10.0, 100.0) <= Band::of(Some(hi), 10.0, 100.0));
        prop_assert_eq!(Band::of(None, 10.0, 100.0), Band::Unknown);
    }

    #[test]
    fn plans_keep_only_healthy_sensors_of_one_cluster(
        cands in vec((0u8..3, prop::option::weighted(0.9, 0.0f64..200.0)), 1..12),
        coverage in 0usize..8,
        low in 1.0f64..80.0,
    ) {
        let candidates: Vec<Candidate> = cands
            .iter()
            .enumerate()
            .map(|(i, (c, e))| Candidate { id: format!("s{i}"), cluster: format!("c{c}"), energy: *e })
            .collect();
        let mut per_cluster: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &candidates {
            *per_cluster.entry(&c.cluster).or_default() += 1;
        }
        let most = *per_cluster.values().max().unwrap();
        let healthy = |c: &Candidate, low: f64| c.energy.is_some_and(|e| e >= low);

        match plan_query("r", &candidates, coverage, low, 100.0, "avg", 10) {
            Ok(plan) => {
                prop_assert_eq!(per_cluster[plan.cluster.as_str()], most);
                let want: Vec<String> = candidates
                    .iter()
                    .filter(|c| c.cluster == plan.cluster && healthy(c, low))
                    .map(|c| c.id.clone())
                    .collect();
                prop_assert_eq!(&plan.selected, &want);
                prop_assert!(plan.selected.len() >= coverage);
                prop_assert_eq!(plan.rationale.len(), candidates.len());

                // A stricter threshold never selects more.
                let stricter = plan_query("r", &candidates, 0, low + 50.0, 150.0, "avg", 10).unwrap();
                prop_assert!(stricter.selected.iter().all(|s| plan.selected.contains(s)));
            }
            Err(e) => {
                let best = per_cluster
                    .iter()
                    .filter(|(_, n)| **n == most)
                    .map(|(c, _)| candidates.iter().filter(|x| &x.cluster == c && healthy(x, low)).count())
                    .next()
                    .unwrap();
                prop_assert!(best < coverage, "{e}");
            }
        }
    }
}

/// Flat per-endpoint file store. Only reads are needed here.
struct Files(BTreeMap<(u32, String), String>);

impl FileService for Files {
    fn list(&mut self, _ep: EndpointId, _path: &[String]) -> NsResult<Vec<Stat>> {
        Err(NsError("unsupported".into()))
    }

    fn read(&mut self, ep: EndpointId, path: &[String]) -> NsResult<Vec<u8>> {
        self.0
            .get(&(ep.0, path.join("/")))
            .map(|s| s.clone().into_bytes())
            .ok_or_else(|| NsError("no such file".into()))
    }

    fn write(&mut self, _ep: EndpointId, _path: &[String], _data: &[u8]) -> NsResult<u32> {
        Err(NsError("unsupported".into()))
    }

    fn stat(&mut self, _ep: EndpointId, _path: &[String]) -> NsResult<Stat> {
        Err(NsError("unsupported".into()))
    }
}

const POINTS: [&str; 4] = ["/a", "/a/b", "/c", "/a/b/x"];

proptest! {
    #[test]
    fn latest_covering_mount_wins(mounts in vec((0usize..POINTS.len(), 1u32..5), 1..8), probe in 0usize..POINTS.len()) {
        let mut ns = Namespace::new();
        for (i, ep) in &mounts {
            ns.mount(POINTS[*i], EndpointId(*ep)).unwrap();
        }
        let path = p(&format!("{}/x/f", POINTS[probe]));
        let mut files = Files(BTreeMap::new());

        let expected = mounts.iter().rev().find_map(|(i, ep)| {
            let point = p(POINTS[*i]);
            path.starts_with(&point).then(|| (EndpointId(*ep), path[point.len()..].to_vec()))
        });
        let got = ns.resolve(&mut files, &path);
        match expected {
            Some((ep, rest)) => prop_assert_eq!(got.unwrap(), Target::Remote { ep, path: rest }),
            None => prop_assert!(got.is_err()),
        }

        // Resolution has no side effects.
        let again = ns.resolve(&mut files, &path);
        prop_assert_eq!(format!("{:?}", ns.resolve(&mut files, &path)), format!("{again:?}"));
    }

    #[test]
    fn bind_reads_through_to_its_source(ep in 1u32..5, content in "[a-z0-9 ]{0,30}") {
        let mut files = Files(BTreeMap::from([((ep, "dir/f".to_string()), content.clone())]));
        let mut ns = Namespace::new();
        ns.mount("/net", EndpointId(ep)).unwrap();
        ns.bind("/net/dir", "/alias").unwrap();
        prop_assert_eq!(ns.read(&mut files, &p("/alias/f")).unwrap(), content.into_bytes());
        prop_assert!(ns.bind("/alias", "/alias/inner").is_err());
    }
}
