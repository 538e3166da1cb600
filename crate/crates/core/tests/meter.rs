//! The allocation meter is process-wide, so everything touching it lives in
//! one test function of its own binary.

use pomp_core::data::{generate_synthetic, SyntheticSpec};
use pomp_core::encoder::EncoderKind;
use pomp_core::numerics::{meter_snapshot, reset_meter, reset_peak, Matrix, Vector};
use pomp_core::training::{estimate_step_memory, measure_step_memory, MemoryFixture, TrainConfig};
use pomp_core::PompError;

#[test]
fn meter_accounting() {
    reset_meter().unwrap();
    assert_eq!(meter_snapshot().live_bytes, 0);

    let m = Matrix::zeros(10, 10);
    assert_eq!(meter_snapshot().live_bytes, 800);
    let c = m.clone();
    assert_eq!(meter_snapshot().live_bytes, 1600);
    assert!(matches!(reset_meter(), Err(PompError::MeterBusy { live_bytes: 1600 })));
    drop(c);
    drop(m);
    let s = meter_snapshot();
    assert_eq!(s.live_bytes, 0);
    assert_eq!(s.peak_bytes, 1600);

    reset_meter().unwrap();
    let v = Vector::zeros(5);
    reset_peak();
    assert_eq!(meter_snapshot().peak_bytes, 40);
    drop(v);

    // one measured step follows the cost model to within a few percent
    let spec = SyntheticSpec {
        n_classes: 40,
        ..SyntheticSpec::standard()
    };
    let u = generate_synthetic(&spec).unwrap();
    let fixture = MemoryFixture {
        encoder: spec.matching_encoder(EncoderKind::MeanPoolLinear).unwrap(),
        vocab: u.vocab,
        dataset: u.pretrain,
    };
    let cfg = TrainConfig {
        k: 32,
        ..TrainConfig::default()
    };
    let unreset = Matrix::zeros(3, 3);
    drop(unreset);
    assert!(matches!(measure_step_memory(&cfg, &fixture), Err(PompError::MeterNotReset { .. })));
    reset_peak();
    let r = measure_step_memory(&cfg, &fixture).unwrap();
    assert_eq!(r.modeled_bytes_per_step, estimate_step_memory(32, 16, 4, 32, 64, 32));
    assert!(r.ratio() > 0.95 && r.ratio() < 1.1, "ratio {}", r.ratio());
}
