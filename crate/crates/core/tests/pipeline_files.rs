use hdrfuse::image_io::{load_hdr, load_ldr, save_ldr};
use hdrfuse::pipeline::{as_reference, fuse_images, fuse_pair, fuse_sequence, run_job, FusionJob};
use hdrfuse::verification::synth_scene;
use hdrfuse::{NetworkConfig, NetworkParams};

#[test]
fn job_from_files_matches_in_memory_chain() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth_scene(9, 24, 16, 2).unwrap();
    let mut inputs = Vec::new();
    for (i, ldr) in scene.ldr_stack.iter().enumerate().rev() {
        let path = dir.path().join(format!("shot{i}.png"));
        save_ldr(ldr, &path).unwrap();
        inputs.push((path, ldr.ev()));
    }
    let params = dir.path().join("p.bin");
    let p = NetworkParams::init(NetworkConfig::tiny(), 9).unwrap();
    p.save(&params).unwrap();
    let out = dir.path().join("out.pfm");
    let job = FusionJob::new(inputs.clone(), params, out.clone(), Some(dir.path().join("t.png"))).unwrap();

    let loaded: Vec<_> = inputs.iter().map(|(path, ev)| load_ldr(path, *ev).unwrap()).collect();
    let in_memory = fuse_images(&loaded, &p).unwrap();
    assert_eq!(fuse_sequence(&job, &p).unwrap(), in_memory);

    let written = run_job(&job).unwrap();
    assert_eq!(written, in_memory);
    let back = load_hdr(&out).unwrap();
    for (a, b) in back.data().iter().zip(in_memory.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert!(dir.path().join("t.png").exists());
}

#[test]
fn two_inputs_use_the_darker_one_as_reference() {
    let scene = synth_scene(1, 16, 16, 1).unwrap();
    let p = NetworkParams::init(NetworkConfig::tiny(), 1).unwrap();
    let (dark, mid) = (&scene.ldr_stack[0], &scene.ldr_stack[1]);
    let seq = fuse_images(&[mid.clone(), dark.clone()], &p).unwrap();
    assert_eq!(seq, fuse_pair(mid, dark, &p).unwrap());
}

#[test]
fn four_inputs_chain_through_intermediates() {
    let scene = synth_scene(2, 16, 16, 1).unwrap();
    let p = NetworkParams::init(NetworkConfig::tiny(), 2).unwrap();
    let brighter = scene.ldr_stack[2].clone().with_ev(4.0);
    let mut all = scene.ldr_stack.clone();
    all.push(brighter.clone());
    // reference is EV 0 (darker middle of -2, 0, 2, 4)
    let step1 = fuse_pair(&all[0], &all[1], &p).unwrap();
    let step2 = fuse_pair(&all[2], &as_reference(&step1).unwrap(), &p).unwrap();
    let step3 = fuse_pair(&brighter, &as_reference(&step2).unwrap(), &p).unwrap();
    assert_eq!(fuse_images(&all, &p).unwrap(), step3);
}

#[test]
fn mismatched_sizes_are_rejected() {
    let a = synth_scene(1, 16, 16, 0).unwrap();
    let b = synth_scene(1, 24, 16, 0).unwrap();
    let p = NetworkParams::init(NetworkConfig::tiny(), 1).unwrap();
    let mixed = vec![a.ldr_stack[0].clone(), b.ldr_stack[1].clone()];
    assert_eq!(fuse_images(&mixed, &p).unwrap_err().code(), "dimension_mismatch");
    assert_eq!(fuse_images(&[], &p).unwrap_err().code(), "invalid_job");
}
