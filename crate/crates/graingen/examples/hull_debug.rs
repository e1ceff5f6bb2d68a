use graingen::deposition::*;
use graingen::rng::run_rng;

fn main() {
    for quench in [1e-2f64, 1e-3, 1e-4] {
        let mut config = SettleConfig::default();
        config.quasi_static_energy = quench;
        let mut poros = Vec::new();
        let mut all_conv = true;
        for seed in 42u64..48 {
            let mut source = (0..400).map(|i| RigidGrain::new(format!("s{i}"), GrainShape::Sphere { radius: 0.175 }));
            let (scene, report) = fill_to_mark(&mut source, Container::default(), &config, seed).unwrap();
            let mut rng = run_rng(7);
            let est = porosity(&scene, 300_000, &mut rng).unwrap();
            poros.push(est.porosity);
            all_conv &= report.converged;
        }
        let strs: Vec<String> = poros.iter().map(|p| format!("{p:.4}")).collect();
        println!("quench={quench:.0e}: porosities [{}] all_conv={all_conv}", strs.join(", "));
    }
}
