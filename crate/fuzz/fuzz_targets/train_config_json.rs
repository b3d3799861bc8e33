#![no_main]
use libfuzzer_sys::fuzz_target;
use semipair::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_json(s) {
        let total = cfg.total_epochs();
        for epoch in 1..=total.min(64) {
            let lr = cfg.lr_at(epoch).unwrap();
            assert!(lr.is_finite());
            cfg.phase_for(epoch).unwrap();
        }
        assert!(cfg.lr_at(total + 1).is_err());
    }
});
