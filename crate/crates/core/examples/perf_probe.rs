// temporary perf probe, not committed
use hoi_forge_core::config::PipelineConfig;
use hoi_forge_core::diffusion::DiffusionSchedule;
use hoi_forge_core::planner::{ConditioningBundle, VideoPlanner};
use hoi_forge_core::rng;
use std::time::Instant;

fn main() {
    let cfg = PipelineConfig::default();
    let model = VideoPlanner::new(&cfg).unwrap();
    let sched = DiffusionSchedule::<f32>::new(cfg.schedule).unwrap();
    let ps = model.init_params::<f32>(1);
    use rand::Rng;
    let mut r = rng::seeded(2);
    let mut env = ndarray::Array3::<u8>::zeros((32, 32, 3));
    env.mapv_inplace(|_| r.gen());
    let cond = ConditioningBundle { text_tokens: [0, 4, 8, 12], env_image: env, fps_tag: 0, null_text: false, null_image: false };
    let t0 = Instant::now();
    let v = model.generate_coarse(&ps, &sched, &cond, 50, 7.5, 7.5, 9).unwrap();
    println!("sample 50 steps x 3 passes: {:.2?} (video {} frames)", t0.elapsed(), v.frames.shape()[0]);
    println!("per forward: {:.1?}", t0.elapsed() / 150);
}
