//! Scratch calibration runs (not part of the test suite).
use biaslab::cbi::{self, BiasTransform, CircleParams, FrameParams};
use biaslab::dataset::{ArtifactKind, Split};
use biaslab::model::{evaluate, TinyCnn, TrainConfig};
use biaslab::synthdata::{generate, ArtifactPlanEntry, GeneratorSpec};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "scale".into());
    match which.as_str() {
        // the acceptance-scale regime: default spec at 2000/class
        "scale" => {
            for k in [0u64, 1, 2] {
                // artifact-free accuracy calibration
                let spec = GeneratorSpec {
                    artifact_plan: vec![],
                    seed: 100 + k,
                    ..GeneratorSpec::default()
                };
                let ds = generate(&spec).unwrap();
                let mut m = TinyCnn::new(32, 2, 200 + k).unwrap();
                let cfg = TrainConfig { seed: 100 + k, ..TrainConfig::default() };
                let t = std::time::Instant::now();
                m.train(&ds.with_split(Split::Train), &cfg, None).unwrap();
                let acc = evaluate(&m, &ds.with_split(Split::Test)).unwrap().accuracy;
                println!("clean seed {k}: acc {acc:.3} ({:?})", t.elapsed());

                // planted-bias switched rates
                let spec = GeneratorSpec { seed: 100 + k, ..GeneratorSpec::default() };
                let ds = generate(&spec).unwrap();
                let mut m = TinyCnn::new(32, 2, 200 + k).unwrap();
                m.train(&ds.with_split(Split::Train), &cfg, None).unwrap();
                let test = ds.with_split(Split::Test);
                let acc = evaluate(&m, &test).unwrap().accuracy;
                let fr = cbi::run_cbi(&m, &test, &BiasTransform::Frame(FrameParams::default()), 909).unwrap();
                let ci = cbi::run_cbi(&m, &test, &BiasTransform::Circle(CircleParams::default()), 909).unwrap();
                println!("planted seed {k}: acc {acc:.3} frame {}/{} circle {}/{}",
                    fr.switched_total, fr.sample_count, ci.switched_total, ci.sample_count);
                let _ = ArtifactKind::Frame;
            }
        }
        _ => panic!("unknown"),
    }
}
