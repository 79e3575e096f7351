use std::collections::HashSet;

use dragevo::contract::{Contract, Evaluator, PhenotypeRunner};
use dragevo::evolve::{best_so_far, dominates, run_evolution, EvolutionConfig, EvolutionResult};
use dragevo::report::{lineage, trajectory_summary};
use dragevo::taskbench::{generate, TaskSpec};

fn small(seed: u64, threads: usize) -> EvolutionConfig {
    EvolutionConfig {
        islands: 2,
        population: 6,
        generations: 6,
        migration_interval: 2,
        master_seed: seed,
        threads,
        ..EvolutionConfig::default()
    }
}

fn evolve(config: &EvolutionConfig) -> EvolutionResult {
    let ds = generate(&TaskSpec::default()).unwrap();
    let evaluator = Evaluator::new(&ds, &PhenotypeRunner);
    run_evolution(config, &evaluator, &Contract::default()).unwrap()
}

#[test]
fn search_invariants_hold() {
    let config = small(5, 1);
    let r = evolve(&config);
    assert_eq!(r.trajectory.len(), config.total_evaluations());

    let best = best_so_far(&r.trajectory);
    assert!(best.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*best.last().unwrap(), r.best_score);
    assert!(r.qd_history.windows(2).all(|w| w[0] <= w[1]));

    let accepted: HashSet<_> = r
        .trajectory
        .iter()
        .filter(|t| t.gate_outcome == "pass")
        .map(|t| t.candidate_id.clone())
        .collect();
    for island in &r.islands {
        for m in &island.population {
            if island.is_elite(m.id()) {
                assert!(m.accepted(), "rejected elite {}", m.id());
            }
        }
    }
    for cell in r.archive.cells.values() {
        assert!(accepted.contains(&cell.genome.id().clone()));
        assert!(cell.fitness >= 0.0);
    }
    for m in &r.migrations {
        assert!(accepted.contains(&m.genome_id), "migrant {} was never accepted", m.genome_id);
    }

    // Survivors on the first front are mutually non-dominated.
    for island in &r.islands {
        let front: Vec<[f64; 3]> = island.population.iter().filter(|m| m.accepted()).map(|m| m.objectives()).collect();
        let nondominated: Vec<&[f64; 3]> = front.iter().filter(|a| !front.iter().any(|b| dominates(b, *a))).collect();
        for a in &nondominated {
            assert!(!nondominated.iter().any(|b| dominates(*b, *a)));
        }
        assert!(!nondominated.is_empty() || front.is_empty());
    }
}

#[test]
fn lineage_is_closed_and_acyclic() {
    let r = evolve(&small(6, 1));
    for t in &r.trajectory {
        let chain = lineage(&r.trajectory, &t.candidate_id).unwrap();
        assert_eq!(chain.last().unwrap().candidate_id, t.candidate_id);
        assert!(chain.windows(2).all(|w| w[0].iteration < w[1].iteration));
        let ids: HashSet<_> = chain.iter().map(|n| (&n.candidate_id, n.iteration)).collect();
        assert_eq!(ids.len(), chain.len());
    }
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let one = evolve(&small(7, 1));
    let again = evolve(&small(7, 1));
    let two = evolve(&small(7, 2));
    assert_eq!(one.trajectory_jsonl(), again.trajectory_jsonl());
    assert_eq!(one.trajectory_jsonl(), two.trajectory_jsonl());
    assert_eq!(one.archive.to_json(), two.archive.to_json());
}

#[test]
fn variants_get_equal_budgets() {
    let base = small(8, 1);
    let runs: Vec<_> = [base.clone(), EvolutionConfig { islands: 1, population: 12, ..base.clone() }]
        .iter()
        .map(|c| evolve(c).trajectory)
        .collect();
    assert_eq!(runs[0].len(), runs[1].len());
    let summary = trajectory_summary(&runs).unwrap();
    assert_eq!(summary.len(), runs[0].len());
    assert!(summary.iter().all(|p| p.min <= p.mean && p.mean <= p.max));
}
