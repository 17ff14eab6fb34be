//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

mod common;

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use sensefs::client::Client;
use sensefs::muxfs::AggregateSpec;
use sensefs::simnet::scenario::generated_scenario;
use sensefs::simnet::LinkModel;
use sensefs::wire::{decode_message, encode_message, Body, FrameReader, OpenMode};
use sensefs::world::unmatched_tags;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn codec_soundness() -> Outcome {
    let start = Instant::now();
    let seen = RefCell::new(BTreeSet::new());
    runner(10_000)
        .run(&arb_message(), |m| {
            seen.borrow_mut().insert(m.body.type_code());
            let bytes = encode_message(&m).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let back = decode_message(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back, m);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let variants = seen.borrow().len();
    ensure(variants == 15, || format!("only {variants} of 15 variants generated"))?;

    runner(2_000)
        .run(&arb_stream(), |(msgs, cuts)| {
            let mut bytes = Vec::new();
            for m in &msgs {
                bytes.extend(encode_message(m).map_err(|e| TestCaseError::fail(e.to_string()))?);
            }
            let mut reader = FrameReader::new();
            let mut got = Vec::new();
            for chunk in split_at_points(&bytes, &cuts) {
                reader.push(&chunk);
                while let Some(frame) = reader.next_frame().map_err(|e| TestCaseError::fail(e.to_string()))? {
                    got.push(decode_message(&frame).map_err(|e| TestCaseError::fail(e.to_string()))?);
                }
            }
            prop_assert!(reader.finish().is_ok());
            prop_assert_eq!(got, msgs);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("10000 messages ({variants} variants) and 2000 split streams in {:.2}s", elapsed.as_secs_f64()))
}

fn pairing_invariant() -> Outcome {
    let mut total = 0;
    for script in ["example1_monitoring", "example2_datacentric"] {
        let mut sh = shell(&zoo_text(), None);
        let report = sh.run_script(&repo_file(&format!("scenarios/{script}.script")));
        ensure(report.exit_code() == 0, || format!("{script}: {}", report.summary()))?;
        let cutoff = sh.world.sim.now();
        sh.world.sim.run_until(cutoff + 500).map_err(|e| e.to_string())?;
        let lines = sh.world.sim.log().lines();
        let unmatched = unmatched_tags(lines, cutoff);
        ensure(unmatched.is_empty(), || format!("{script}: unmatched {unmatched:?}"))?;
        total += lines.iter().filter(|l| l.contains("\tsend\t") && l.split('\t').nth(4).is_some_and(|d| d.starts_with('T'))).count();
    }
    Ok(format!("{total} requests, 0 unmatched tags"))
}

fn golden_tree() -> Outcome {
    let mut sh = shell(&zoo_text(), None);
    sh.execute("mount /dev/network /network")?;
    let got = sh.execute("tree /network")?;
    let want = golden("zoo_network.txt");
    if got == want {
        return Ok(format!("{} entries match", want.lines().count()));
    }
    let diff = want
        .lines()
        .zip(got.lines())
        .position(|(a, b)| a != b)
        .unwrap_or(want.lines().count().min(got.lines().count()));
    Err(format!("listing differs at line {}", diff + 1))
}

#[derive(Clone)]
enum Raw {
    Constant(f64),
    Ramp(f64, f64),
    Table(Vec<(u64, f64)>),
}

impl Raw {
    fn toml(&self) -> String {
        match self {
            Raw::Constant(v) => format!("{v:?}"),
            Raw::Ramp(a, b) => format!("{{ ramp = [{a:?}, {b:?}] }}"),
            Raw::Table(pts) => {
                let items: Vec<String> = pts.iter().map(|(t, v)| format!("[{t}, {v:?}]")).collect();
                format!("{{ table = [{}] }}", items.join(", "))
            }
        }
    }

    fn at(&self, t: u64) -> f64 {
        match self {
            Raw::Constant(v) => *v,
            Raw::Ramp(a, b) => a + b * t as f64,
            Raw::Table(pts) => {
                let mut v = pts[0].1;
                for (pt, pv) in pts {
                    if *pt <= t {
                        v = *pv;
                    }
                }
                v
            }
        }
    }
}

fn random_raw(rng: &mut ChaCha8Rng) -> Raw {
    match rng.random_range(0..3) {
        0 => Raw::Constant(rng.random_range(-20.0..40.0)),
        1 => Raw::Ramp(rng.random_range(-20.0..40.0), rng.random_range(-0.01..0.01)),
        _ => {
            let t1 = rng.random_range(1..800);
            let t2 = t1 + rng.random_range(1..800);
            Raw::Table(vec![
                (0, rng.random_range(-20.0..40.0)),
                (t1, rng.random_range(-20.0..40.0)),
                (t2, rng.random_range(-20.0..40.0)),
            ])
        }
    }
}

fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn aggregation_oracle() -> Outcome {
    const SENSORS: usize = 6;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raws: Vec<Raw> = (0..SENSORS).map(|_| random_raw(&mut rng)).collect();
        let mut text = format!("[scenario]\nname = \"agg\"\nseed = {seed}\n\n[cluster.c]\nlatency = 2\n\n");
        for (i, r) in raws.iter().enumerate() {
            let _ = writeln!(
                text,
                "[sensor.a{i}]\ncluster = \"c\"\nkind = \"temperature\"\nposition = [0.0, 0.0]\nenergy = 100.0\nraw = {}\n",
                r.toml()
            );
        }
        let mut w = world(&text, None);
        w.register_aggregation("median", |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            let n = s.len();
            vec![if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 }]
        });
        let mut c = Client::new(w.client, "admin");
        let offsets: Vec<f64> = (0..SENSORS).map(|_| rng.random_range(-5.0..5.0)).collect();
        for (i, off) in offsets.iter().enumerate() {
            write_text(&mut w, &mut c, "c", &format!("sensors/a{i}/control"), &format!("{off}"))?;
        }
        let members: Vec<usize> = loop {
            let m: Vec<usize> = (0..SENSORS).filter(|_| rng.random_bool(0.5)).collect();
            if !m.is_empty() {
                break m;
            }
        };
        for func in ["avg", "min", "max", "median"] {
            w.add_aggregate(
                "c",
                AggregateSpec {
                    name: format!("agg_{func}"),
                    kind: None,
                    tag: None,
                    members: Some(members.iter().map(|i| format!("a{i}")).collect()),
                    source: "reading".into(),
                    func: func.into(),
                },
            )?;
            let out = read_text(&mut w, &mut c, "c", &format!("aggrData/agg_{func}"))?;
            let mut lines = out.lines();
            let got = parse_floats(lines.next().unwrap_or(""));
            let n = members.len();
            ensure(lines.next() == Some(&format!("# n={n}/{n}")), || format!("seed {seed}: {out:?}"))?;
            let log = w.sim.log().lines();
            let mut values = Vec::new();
            for &i in &members {
                let name = format!("a{i}");
                let tick = log
                    .iter()
                    .rev()
                    .find_map(|l| {
                        let f: Vec<&str> = l.split('\t').collect();
                        (f[1] == "recv" && f[3] == name && f[4].starts_with("Tread")).then(|| f[0].parse::<u64>().unwrap())
                    })
                    .ok_or_else(|| format!("seed {seed}: no read of {name}"))?;
                values.push(raws[i].at(tick) + offsets[i]);
            }
            let want = match func {
                "avg" => values.iter().sum::<f64>() / n as f64,
                "min" => values.iter().copied().fold(f64::INFINITY, f64::min),
                "max" => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                _ => median(&values),
            };
            ensure(got.len() == 1, || format!("seed {seed}: {out:?}"))?;
            let delta = (got[0] - want).abs();
            worst = worst.max(delta);
            ensure(delta <= 1e-9, || format!("seed {seed} {func}: got {} want {want}", got[0]))?;
        }
    }
    Ok(format!("100 seeds x avg/min/max/median, max |delta| = {worst:e}"))
}

fn outstanding_requests() -> Outcome {
    let mut w = world(&zoo_text(), None);
    let ep = w.cluster_ep("cluster1").unwrap();
    let mut c = Client::new(w.client, "admin");
    let mut fids = Vec::new();
    for id in ["s1", "s3"] {
        let (fid, _) = c.walk(&mut w.sim, ep, &p(&format!("sensors/{id}/reading"))).map_err(|e| e.to_string())?;
        c.open(&mut w.sim, ep, fid, OpenMode::Read).map_err(|e| e.to_string())?;
        c.read(&mut w.sim, ep, fid, 0, 64).map_err(|e| e.to_string())?;
        fids.push(fid);
    }
    let (local, _) = c.walk(&mut w.sim, ep, &p("aggrData")).map_err(|e| e.to_string())?;
    w.set_sensor_link("s1", LinkModel::new(200, 0, 0.0))?;

    let t0 = w.sim.now();
    let read = |fid| Body::Tread { fid, offset: 0, count: 64 };
    let t1 = c.send(&mut w.sim, ep, read(fids[0])).map_err(|e| e.to_string())?;
    let t3 = c.send(&mut w.sim, ep, read(fids[1])).map_err(|e| e.to_string())?;
    let ts = c.send(&mut w.sim, ep, Body::Tstat { fid: local }).map_err(|e| e.to_string())?;
    let (b1, at1) = c.wait(&mut w.sim, ep, t1).map_err(|e| e.to_string())?;
    let (b3, at3) = c.wait(&mut w.sim, ep, t3).map_err(|e| e.to_string())?;
    let (bs, ats) = c.wait(&mut w.sim, ep, ts).map_err(|e| e.to_string())?;
    ensure(matches!(b1, Body::Rread { .. }) && matches!(b3, Body::Rread { .. }), || format!("{b1:?} {b3:?}"))?;
    ensure(matches!(bs, Body::Rstat { .. }), || format!("{bs:?}"))?;
    ensure(at3 + 150 <= at1, || format!("s3 at +{} vs s1 at +{}", at3 - t0, at1 - t0))?;
    ensure(ats - t0 <= 2, || format!("local stat took {}", ats - t0))?;
    Ok(format!("s1 +{} ticks, s3 +{} ticks, local stat +{} ticks", at1 - t0, at3 - t0, ats - t0))
}

fn region_plan() -> Outcome {
    let mut sh = shell(&zoo_text(), None);
    sh.execute("mount /dev/network /network")?;
    sh.execute("view build location /network/location")?;
    sh.execute("view build resource")?;
    let out = sh.execute("plan region-10 4 avg 100")?;
    let selected: BTreeSet<&str> = out
        .lines()
        .find_map(|l| l.strip_prefix("selected "))
        .ok_or("no selection line")?
        .split_whitespace()
        .collect();
    let want: BTreeSet<&str> = ["s1", "s3", "s6", "s7"].into();
    ensure(selected == want, || format!("selected {selected:?}"))?;
    for id in ["s4", "s5"] {
        let line = format!("{id} excluded low energy");
        ensure(out.lines().any(|l| l == line), || format!("missing `{line}`"))?;
    }
    Ok("selected {s1, s3, s6, s7}; s4, s5 excluded for low energy".into())
}

fn duty_cycle_run() -> Result<(String, String), String> {
    let text = "[scenario]\nname = \"duty\"\nseed = 3\nttl = 30\n\n[cluster.c]\nlatency = 2\n\n\
                [sensor.d1]\ncluster = \"c\"\nkind = \"temperature\"\nposition = [0.0, 0.0]\n\
                energy = 100.0\nraw = 21.5\nduty = [50, 50, 0]\n";
    let mut w = world(text, None);
    let ep = w.cluster_ep("c").unwrap();
    let mut c = Client::new(w.client, "admin");
    let (fid, _) = c.walk(&mut w.sim, ep, &p("sensors/d1/reading")).map_err(|e| e.to_string())?;
    c.open(&mut w.sim, ep, fid, OpenMode::Read).map_err(|e| e.to_string())?;
    let next_cycle = |now: u64| (now / 100 + 1) * 100;

    let warm = next_cycle(w.sim.now()) + 5;
    w.sim.run_until(warm).map_err(|e| e.to_string())?;
    c.read(&mut w.sim, ep, fid, 0, 64).map_err(|e| e.to_string())?;

    let base = next_cycle(w.sim.now());
    w.sim.run_until(base + 38).map_err(|e| e.to_string())?;
    let fresh = c.read(&mut w.sim, ep, fid, 0, 64).map_err(|e| e.to_string())?;
    let entry = w.mux("c").unwrap().cache_entry("d1", "reading").cloned().ok_or("nothing cached")?;
    ensure((40..50).contains(&(entry.stamp % 100)), || format!("cache stamp {}", entry.stamp))?;

    // Arrives at the cluster head when the cache is 10 ticks old.
    w.sim.run_until(entry.stamp + 9).map_err(|e| e.to_string())?;
    let cached = c.read(&mut w.sim, ep, fid, 0, 64).map_err(|e| e.to_string())?;
    ensure(cached == fresh, || "cached value differs".into())?;
    let flagged = w
        .sim
        .log()
        .lines()
        .iter()
        .any(|l| l.contains("\tcached\t") && l.ends_with("age=10"));
    ensure(flagged, || "no cached log line with age=10".into())?;

    w.sim.run_until(entry.stamp + 39).map_err(|e| e.to_string())?;
    let stale = c.read(&mut w.sim, ep, fid, 0, 64);
    ensure(
        stale.as_ref().err().map(|e| e.to_string()).as_deref() == Some("device unreachable"),
        || format!("age 40 gave {stale:?}"),
    )?;
    Ok((String::from_utf8_lossy(&cached).into_owned(), w.sim.log().text()))
}

fn duty_cycle_caching() -> Outcome {
    let (value, log1) = duty_cycle_run()?;
    let (_, log2) = duty_cycle_run()?;
    ensure(log1 == log2, || "event logs differ between runs".into())?;
    Ok(format!("age 10 served cached {:?}; age 40 -> device unreachable; logs identical", value.trim()))
}

fn permissions() -> Outcome {
    let mut w = world(&zoo_text(), None);
    let mut c = Client::new(w.client, "guest");
    read_text(&mut w, &mut c, "cluster1", "sensors/s1/reading")?;
    let denied = write_text(&mut w, &mut c, "cluster1", "sensors/s1/control", "1.0");
    ensure(denied == Err("permission denied".into()), || format!("guest write gave {denied:?}"))?;
    c.set_uname("admin");
    write_text(&mut w, &mut c, "cluster1", "sensors/s1/control", "1.0")?;
    Ok("guest reads, guest control write -> \"permission denied\", admin writes".into())
}

fn scale() -> Outcome {
    let start = Instant::now();
    let text = generated_scenario(10, 30, 5);
    let mut sh = shell(&text, None);
    for (c, _) in sh.world.clusters.clone() {
        let n = sh.world.mux(&c).unwrap().discovered().len();
        ensure(n == 30, || format!("{c} discovered {n}"))?;
    }
    sh.execute("mount /dev/network /network")?;
    let listing = sh.execute("tree /network")?;
    let sensors: Vec<(String, String)> = sh.world.cfg.sensors.iter().map(|s| (s.id.clone(), s.cluster.clone())).collect();
    for (id, cluster) in &sensors {
        let v = sh.execute(&format!("cat /network/{cluster}/sensors/{id}/reading"))?;
        ensure(v.trim().parse::<f64>().is_ok(), || format!("{id}: {v:?}"))?;
    }
    let elapsed = start.elapsed();
    let rss = peak_rss_kib();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    ensure(rss.is_none_or(|k| k < 512 * 1024), || format!("peak rss {rss:?} KiB"))?;
    Ok(format!(
        "300 sensors: {} entries listed, {} readings in {:.2}s, peak rss {} MiB",
        listing.lines().count(),
        sensors.len(),
        elapsed.as_secs_f64(),
        rss.map_or("n/a".into(), |k| (k / 1024).to_string())
    ))
}

fn calibration() -> Outcome {
    let mut w = world(&zoo_text(), None);
    let mut c = Client::new(w.client, "admin");
    let raw = 20.9_f64;
    let cell = RefCell::new((&mut w, &mut c));
    runner(64)
        .run(&(-1000.0f64..1000.0), |off| {
            let mut g = cell.borrow_mut();
            let (w, c) = &mut *g;
            write_text(w, c, "cluster1", "sensors/s1/control", &format!("{off}")).map_err(TestCaseError::fail)?;
            let v = read_text(w, c, "cluster1", "sensors/s1/reading").map_err(TestCaseError::fail)?;
            prop_assert_eq!(v.trim().parse::<f64>().unwrap(), raw + off);
            write_text(w, c, "cluster1", "sensors/s1/control", "reset").map_err(TestCaseError::fail)?;
            let v = read_text(w, c, "cluster1", "sensors/s1/reading").map_err(TestCaseError::fail)?;
            prop_assert_eq!(v.trim().parse::<f64>().unwrap(), raw);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("64 random offsets: reading = raw + offset exactly, reset restores raw".into())
}

fn energy_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut text = String::from("[scenario]\nname = \"energy\"\nseed = 99\n\n[energy]\ntx = 0.0013\nrx = 0.0007\nidle = 0.0000011\n\n");
    let mut duties = Vec::new();
    let mut energies = Vec::new();
    for c in 0..2 {
        let _ = writeln!(text, "[cluster.c{c}]\nlatency = 2\njitter = 2\nloss = 0.1\n");
    }
    for i in 0..8 {
        let duty = rng.random_bool(0.6).then(|| (rng.random_range(20..80u64), rng.random_range(1..80u64), rng.random_range(0..100u64)));
        let energy: f64 = rng.random_range(20.0..80.0);
        let mut s = format!(
            "[sensor.n{i}]\ncluster = \"c{}\"\nkind = \"temperature\"\nposition = [0.0, 0.0]\nenergy = {energy:?}\nraw = 20.0\nloss_up = {:?}\n",
            i % 2,
            rng.random_range(0.0..0.3)
        );
        if let Some((on, off, ph)) = duty {
            let _ = writeln!(s, "duty = [{on}, {off}, {ph}]");
        }
        text.push_str(&s);
        text.push('\n');
        duties.push(duty);
        energies.push(energy);
    }
    let mut w = world(&text, None);
    let mut c = Client::new(w.client, "admin");
    c.set_timeout(300);
    let files = ["reading", "remaining-energy", "info", "registers"];
    let mut requests = 0;
    while w.sim.now() < 9_000 {
        let i = rng.random_range(0..8);
        let f = files[rng.random_range(0..files.len())];
        let _ = read_text(&mut w, &mut c, &format!("c{}", i % 2), &format!("sensors/n{i}/{f}"));
        requests += 1;
        let t = w.sim.now() + rng.random_range(0..40);
        w.sim.run_until(t).map_err(|e| e.to_string())?;
    }
    let end = w.sim.now().max(10_000);
    w.sim.run_until(end).map_err(|e| e.to_string())?;
    ensure(w.sim.stats().dropped_energy == 0, || "a sensor ran dry".into())?;

    let nj = |j: f64| (j * 1e9).round() as u64;
    let (tx, rx, idle) = (nj(0.0013), nj(0.0007), nj(0.0000011));
    let log = w.sim.log().lines().to_vec();
    for i in 0..8 {
        let name = format!("n{i}");
        let (sent, recv) = frame_counts(&log, &name);
        let awake = awake_ticks_oracle(duties[i], end);
        let want = nj(energies[i]) - tx * sent - rx * recv - idle * awake;
        let got = w.sensor_mut(&name).unwrap().radio.energy_nj(end);
        ensure(got == want, || format!("{name}: {got} nJ, closed form {want} nJ"))?;
    }
    Ok(format!("8 sensors over {end} ticks ({requests} client requests): exact to the nanojoule"))
}

fn determinism() -> Outcome {
    let runs = [
        ("example1_monitoring", zoo_text()),
        ("example2_datacentric", zoo_text()),
        ("example3_emergency", factory_text()),
    ];
    for (script, scn) in &runs {
        let text = repo_file(&format!("scenarios/{script}.script"));
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let mut sh = shell(scn, Some(1234));
            sh.run_script(&text);
            outputs.push((sh.transcript.clone(), sh.world.sim.log().text()));
        }
        ensure(outputs[0].0 == outputs[1].0, || format!("{script}: transcripts differ"))?;
        ensure(outputs[0].1 == outputs[1].1, || format!("{script}: event logs differ"))?;
    }
    Ok("3 bundled scripts: identical transcripts and event logs across runs".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("codec soundness", codec_soundness),
        ("pairing invariant", pairing_invariant),
        ("golden zoo tree", golden_tree),
        ("aggregation oracle", aggregation_oracle),
        ("outstanding requests", outstanding_requests),
        ("region-10 plan", region_plan),
        ("duty-cycle caching", duty_cycle_caching),
        ("permissions", permissions),
        ("scale", scale),
        ("calibration", calibration),
        ("energy conservation", energy_conservation),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
