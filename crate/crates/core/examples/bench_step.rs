use std::time::Instant;
use sltrain::harness::*;
use sltrain::model::*;
fn main() {
    let text = synthetic_text(1_200_000, 1);
    let corpus = Corpus::from_bytes(&text).unwrap();
    let data = DataSplit::from_stream(&corpus.tokens, 256, 0.05).unwrap();
    for mode in [ParamMode::FullRank, ParamMode::LowRank, ParamMode::Sltrain] {
        let mut m = ModelConfig::micro(mode);
        m.seq_len = 32;
        let cfg = TrainConfig {
            model: m, optim: Default::default(),
            schedule: ScheduleConfig { peak_lr: 0.003, warmup_steps: None, floor_frac: 0.1 },
            batch_size: 8, steps: 2000, eval_interval: 0, eval_max_tokens: Some(16384), data_seed: 0,
            data: DataConfig { train: "x".into(), val: None, val_fraction: 0.05, format: CorpusFormat::Auto },
            checkpoint: None, out_dir: None, freeze: FreezeFlags::default(), finetune: None,
        };
        let mut t = Trainer::new(cfg, data.clone()).unwrap();
        let s = Instant::now();
        for _ in 0..50 { t.step().unwrap(); }
        let per = s.elapsed().as_secs_f64() / 50.0;
        let s = Instant::now();
        let (l, p) = t.evaluate().unwrap();
        println!("{mode:?}: {:.4}s/step eval {:.2}s loss {l:.3} ppl {p:.2}", per, s.elapsed().as_secs_f64());
    }
}
