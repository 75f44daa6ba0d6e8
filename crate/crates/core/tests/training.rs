use windsr::denoiser::{train, ModelConfig, TrainConfig};
use windsr::diffusion::make_linear_schedule;
use windsr::grid::extract_patches;
use windsr::synth::{gen_scene, SynthConfig};
use windsr::PatchPair;

#[test]
fn toy_run_loss_drops_by_a_third() {
    let mut data = Vec::new();
    for seed in 0..32u64 {
        let s = gen_scene(&SynthConfig { seed, ..Default::default() }).unwrap();
        let hr = extract_patches(&s.truth, 32, 32).unwrap();
        let ht = extract_patches(&s.terrain, 32, 32).unwrap();
        for (h, t) in hr.into_iter().zip(ht) {
            data.push(PatchPair::from_hr(h, t, 4).unwrap());
        }
    }
    data.truncate(500);
    let sched = make_linear_schedule(200, 5e-4, 0.1).unwrap();
    let mcfg = ModelConfig { hidden_channels: 16, ..Default::default() };
    let tcfg = TrainConfig { iterations: 2000, batch_size: 4, seed: 7, ..Default::default() };
    let out = train(&data, &mcfg, &sched, &tcfg).unwrap();
    let l = &out.losses;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&l[..100]), mean(&l[l.len() - 100..]));
    assert!(tail <= 0.7 * head, "head {head}, tail {tail}");
    assert!(out.model.params.all_finite());
}
