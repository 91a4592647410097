use attnlab::attention::policy::InjectionPolicy;
use attnlab::backend::adapter::ModelAdapter;
use attnlab::backend::ddim::SamplerConfig;
use attnlab::editing::fpe::{run_edit, run_edit_on_image};
use attnlab::editing::job::{EditJob, EditSource, RealMethod};
use attnlab::editing::sweep::{ablation_sweep, SweepGrid, SweepMode, SweepOptions};
use attnlab::io::image::{read_rgb, write_png};

fn short(seed: u64) -> SamplerConfig {
    SamplerConfig {
        step_count: 6,
        seed,
        ..Default::default()
    }
}

#[test]
fn cached_and_lockstep_sweeps_agree() {
    let adapter = ModelAdapter::tiny_test(0).unwrap();
    let mut base = EditJob::generated(5, "a red car", "a blue car");
    base.sampler = short(5);
    base.policy = InjectionPolicy::self_only(1..=4, 0.6);
    let grid = SweepGrid {
        modes: vec![SweepMode::SelfOnly, SweepMode::CrossFixedSelfVarying],
        site_sets: vec![vec![1, 2], vec![3, 4]],
        ratios: vec![0.0, 0.5, 1.0],
        cross_fixed_ratio: 0.5,
    };
    let dir = tempfile::tempdir().unwrap();
    let cached = ablation_sweep(&adapter, &base, &grid, &dir.path().join("cached"), SweepOptions::default()).unwrap();
    let lockstep = ablation_sweep(
        &adapter,
        &base,
        &grid,
        &dir.path().join("lockstep"),
        SweepOptions { cache_budget_bytes: 0 },
    )
    .unwrap();
    assert!(cached.source_cached);
    assert!(!lockstep.source_cached);
    assert_eq!(cached.cells.len(), 12);
    assert_eq!(cached.failed(), 0);
    for (a, b) in cached.cells.iter().zip(&lockstep.cells) {
        let name = a.image.as_ref().unwrap();
        let ia = read_rgb(&dir.path().join("cached").join(name)).unwrap();
        let ib = read_rgb(&dir.path().join("lockstep").join(b.image.as_ref().unwrap())).unwrap();
        assert!(ia == ib, "cell {name} differs between cached and lockstep runs");
        assert_eq!(a.replaced_self, b.replaced_self);
    }
    assert!(dir.path().join("cached/grid.png").is_file());
}

#[test]
fn zero_ratio_cells_replace_nothing() {
    let adapter = ModelAdapter::tiny_test(0).unwrap();
    let mut base = EditJob::generated(2, "a cat", "a dog");
    base.sampler = short(2);
    base.policy = InjectionPolicy::self_only(1..=4, 0.6);
    let grid = SweepGrid::self_ratios([1, 2, 3, 4], &[0.0, 1.0]);
    let dir = tempfile::tempdir().unwrap();
    let manifest = ablation_sweep(&adapter, &base, &grid, dir.path(), SweepOptions::default()).unwrap();
    assert_eq!(manifest.cells[0].replaced_self, 0);
    // Four self sites at each of the six steps.
    assert_eq!(manifest.cells[1].replaced_self, 4 * 6);
}

#[test]
fn real_image_edit_from_file_matches_in_memory_edit() {
    let adapter = ModelAdapter::tiny_test(0).unwrap();
    let z = adapter.generate("a red car", &short(4), &mut attnlab::attention::NoHook).unwrap();
    let image = adapter.decode_latent(&z).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("car.png");
    write_png(&image, &path).unwrap();

    let mut job = EditJob::real(&path, "a blue car");
    job.sampler = short(4);
    job.policy = InjectionPolicy::self_only(1..=4, 0.5);
    let from_file = run_edit(&adapter, &job).unwrap();
    let in_memory = run_edit_on_image(&adapter, &job, &image).unwrap();
    assert!(from_file.edited_image == in_memory.edited_image);
    assert!(from_file.null_text.is_none());
    assert_eq!(from_file.edited_image.dimensions(), (128, 128));
}

#[test]
fn null_text_edit_records_one_trace_per_step() {
    let adapter = ModelAdapter::tiny_test(0).unwrap();
    let z = adapter.generate("a red car", &short(6), &mut attnlab::attention::NoHook).unwrap();
    let image = adapter.decode_latent(&z).unwrap();
    let mut job = EditJob::real("unused.png", "a blue car");
    job.source = EditSource::RealImage {
        path: "unused.png".into(),
        prompt: Some("a red car".into()),
    };
    job.sampler = short(6);
    job.policy = InjectionPolicy::self_only(1..=4, 0.6);
    job.real.method = RealMethod::NullText;
    job.real.null_text.iterations = 3;
    let out = run_edit_on_image(&adapter, &job, &image).unwrap();
    let state = out.null_text.expect("null-text state");
    assert_eq!(state.losses.len(), 6);
    assert_eq!(state.per_step_null_embeddings.len(), 6);
    for trace in &state.losses {
        assert!(trace.windows(2).all(|w| w[1] < w[0]), "accepted losses must decrease: {trace:?}");
    }
}
