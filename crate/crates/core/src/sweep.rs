//! Runs many independent simulations, one per seed. With the `parallel`
//! feature the seeds are spread over a rayon pool; without it they run in
//! order on the calling thread. Results come back in seed order either way.

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::client::{split_path, Client};
use crate::shell::{DEFAULT_USER, DISCOVERY_LIMIT};
use crate::simnet::FrameStats;
use crate::world::World;

#[cfg(feature = "parallel")]
pub fn map_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| f(s)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    map_seeds_sequential(seeds, f)
}

pub fn map_seeds_sequential<T, F: Fn(u64) -> T>(seeds: &[u64], f: F) -> Vec<T> {
    seeds.iter().map(|&s| f(s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub end_tick: u64,
    pub log_lines: usize,
    pub log_digest: u64,
    pub stats: FrameStats,
    pub readings_ok: usize,
}

/// Discovers the scenario, reads every sensor's reading once through its
/// cluster head and runs on until `until`.
pub fn survey(text: &str, seed: u64, until: u64) -> Result<RunSummary, String> {
    let mut w = World::load(text, Some(seed)).map_err(|e| e.to_string())?;
    w.discover(DISCOVERY_LIMIT).map_err(|e| e.to_string())?;
    let mut client = Client::new(w.client, DEFAULT_USER);
    let mut readings_ok = 0;
    let sensors: Vec<(String, String)> = w
        .cfg
        .sensors
        .iter()
        .map(|s| (s.id.clone(), s.cluster.clone()))
        .collect();
    for (id, cluster) in sensors {
        let ep = w.cluster_ep(&cluster).expect("configured cluster");
        let path = split_path(&format!("sensors/{id}/reading"));
        if client.read_file(&mut w.sim, ep, &path).is_ok() {
            readings_ok += 1;
        }
    }
    if w.sim.now() < until {
        w.sim.run_until(until).map_err(|e| e.to_string())?;
    }
    let text = w.sim.log().text();
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    Ok(RunSummary {
        seed,
        end_tick: w.sim.now(),
        log_lines: w.sim.log().len(),
        log_digest: h.finish(),
        stats: w.sim.stats(),
        readings_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::scenario::generated_scenario;

    #[test]
    fn parallel_and_sequential_agree() {
        let text = generated_scenario(2, 4, 1);
        let seeds: Vec<u64> = (0..6).collect();
        let a = map_seeds(&seeds, |s| survey(&text, s, 500).unwrap());
        let b = map_seeds_sequential(&seeds, |s| survey(&text, s, 500).unwrap());
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.readings_ok == 8));
        assert_eq!(a.iter().map(|r| r.seed).collect::<Vec<_>>(), seeds);
    }
}
