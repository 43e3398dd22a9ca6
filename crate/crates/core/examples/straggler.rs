use permfl_core::sched::{run_scenario, SchedAlgorithm, Scenario};

fn main() {
    for alg in [SchedAlgorithm::Gd, SchedAlgorithm::DcgdPermkAes] {
        let r = run_scenario(&Scenario::straggler(alg)).unwrap();
        println!(
            "{alg:?}: naive {:.3} s, refined {:.3} s, speedup {:.3}, iterations {}, converged {}",
            r.naive.makespan,
            r.refined.schedule.makespan,
            r.speedup(),
            r.refined.iterations(),
            r.refined.converged
        );
    }
}
