use std::fs;
use std::path::Path;

use nlf::checkpoint::{Checkpoint, FORMAT_VERSION};
use nlf::color::{linear_to_srgb8, quantize, srgb8_to_linear};
use nlf::imageio::{read_float_map, read_png, write_float_map, write_png};
use nlf::manifest::{load_scene, manifest_for, save_scene, SceneManifest};
use nlf::Error;
use nlf_core::image::Image;
use nlf_core::model::{ModelConfig, ModelParams};
use nlf_core::sampler::SamplerConfig;
use nlf_core::synthetic::{generate_synthetic, Primitive, Rig, SyntheticSceneSpec, Texture};
use nlf_core::train::OptState;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        primitives: vec![
            Primitive::Plane { depth: 3.0, texture: Texture::Checker { period: 0.5, albedo: [[0.9, 0.7, 0.2], [0.1, 0.3, 0.6]] }, extent: None },
            Primitive::SpecularSphere { center: [0.1, 0.0, 2.0], radius: 0.4, albedo: [0.6, 0.2, 0.2], specular: 0.6, exponent: 30.0 },
        ],
        rig: Rig::Arc { radius: 2.0, angle: 0.6, target: [0.0, 0.0, 2.0] },
        count: 4,
        width: 20,
        height: 14,
        focal: 18.0,
        test_views: vec![2],
        ..Default::default()
    }
}

#[test]
fn srgb_codes_survive_a_round_trip() {
    for code in 0..=255u8 {
        assert_eq!(linear_to_srgb8(srgb8_to_linear(code)), code);
    }
    assert_eq!(linear_to_srgb8(-1.0), 0);
    assert_eq!(linear_to_srgb8(2.0), 255);
    assert_eq!(linear_to_srgb8(f32::NAN), 0);
    // 18% grey is the classic mid-tone code 118
    assert_eq!(linear_to_srgb8(0.18), 118);
}

proptest! {
    #[test]
    fn encoding_is_monotone(a in 0.0f32..1.0, b in 0.0f32..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(linear_to_srgb8(lo) <= linear_to_srgb8(hi));
    }
}

#[test]
fn png_and_float_maps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Image::from_fn(7, 5, 3, |_, _, _| 0.0);
    let img = Image { data: img.data.iter().map(|_| rng.random::<f32>()).collect(), ..img };
    let png = dir.path().join("a.png");
    write_png(&png, &img).unwrap();
    assert_eq!(read_png(&png).unwrap(), quantize(&img));
    let map = Image { channels: 1, data: (0..35).map(|i| i as f32 * 0.37 - 4.0).collect(), ..img.clone() };
    let path = dir.path().join("a.f32");
    write_float_map(&path, &map).unwrap();
    assert_eq!(read_float_map(&path).unwrap(), map);
    fs::write(&path, b"NLFMAP01garbage").unwrap();
    assert!(read_float_map(&path).is_err());
}

#[test]
fn saved_scene_loads_back() {
    let scene = generate_synthetic(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_scene(&scene, dir.path()).unwrap();
    let loaded = load_scene(&path).unwrap();
    assert_eq!(loaded.num_train, scene.num_train);
    assert_eq!(loaded.parametrization, scene.parametrization);
    assert_eq!(loaded.frame, scene.frame);
    for (a, b) in scene.views.iter().zip(&loaded.views) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.camera.view_id, b.camera.view_id);
        assert!((a.camera.intrinsics - b.camera.intrinsics).abs().max() < 1e-12);
        assert!((a.camera.rotation - b.camera.rotation).abs().max() < 1e-12);
        assert!((a.camera.translation - b.camera.translation).abs().max() < 1e-12);
        // pixels come back as the 8-bit values that were stored
        assert_eq!(b.image, quantize(&a.image));
        assert_eq!(a.depth, b.depth);
    }
    // the manifest text itself is lossless
    let manifest = SceneManifest::read(&path).unwrap();
    assert_eq!(manifest, manifest_for(&scene));
    assert_eq!(SceneManifest::parse(&manifest.to_toml(), &path).unwrap(), manifest);
}

fn write_manifest(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("scene.toml");
    fs::write(&path, text).unwrap();
    path
}

const TWO_CAMERAS: &str = r#"
parametrization = "slab"

[frame]
z_st = 1.0
z_uv = 4.0
sphere_center = [0.0, 0.0, 2.0]
sphere_radius = 3.0
near = 1.0
far = 4.0

[splits]
train = [0]
test = [1]

[[cameras]]
name = "left"
image = "left.png"
width = 4
height = 3
fx = 4.0
fy = 4.0
cx = 1.5
cy = 1.0
rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
translation = [0.5, 0.0, 0.0]

[[cameras]]
name = "right"
image = "right.png"
width = 4
height = 3
fx = 4.0
fy = 4.0
cx = 1.5
cy = 1.0
rotation = ROTATION
translation = [-0.5, 0.0, 0.0]
"#;

fn two_camera_dir(rotation: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    for name in ["left", "right"] {
        write_png(&dir.path().join(format!("{name}.png")), &Image::filled(4, 3, 3, 0.25)).unwrap();
    }
    let path = write_manifest(dir.path(), &TWO_CAMERAS.replace("ROTATION", rotation));
    (dir, path)
}

#[test]
fn minimal_manifest_loads() {
    let (_dir, path) = two_camera_dir("[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]");
    let scene = load_scene(&path).unwrap();
    assert_eq!(scene.views.len(), 2);
    assert_eq!(scene.num_train, 1);
    assert_eq!(scene.views[0].name, "left");
    assert_eq!(scene.test_views()[0].name, "right");
    assert_eq!(scene.views[1].camera.center().x, 0.5);
}

#[test]
fn manifest_errors_name_the_problem() {
    let (dir, path) = two_camera_dir("[[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]");
    assert!(matches!(load_scene(&path), Err(Error::InvalidPose { view_id: 1, .. })));

    let (dir2, path2) = two_camera_dir("[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]");
    fs::remove_file(dir2.path().join("left.png")).unwrap();
    match load_scene(&path2) {
        Err(Error::MissingImage { view_id: 0, path }) => assert!(path.ends_with("left.png")),
        other => panic!("{other:?}"),
    }

    let bad = write_manifest(dir.path(), "parametrization = \"slab\"\n[frame\n");
    assert!(matches!(load_scene(&bad), Err(Error::Parse { .. })));

    let overlapping = TWO_CAMERAS.replace("test = [1]", "test = [0]").replace("ROTATION", "[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]");
    assert!(matches!(load_scene(&write_manifest(dir.path(), &overlapping)), Err(Error::Manifest(_))));

    // declared size differs from the image on disk
    let resized = TWO_CAMERAS.replace("width = 4", "width = 5").replace("ROTATION", "[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]");
    assert!(matches!(load_scene(&write_manifest(dir.path(), &resized)), Err(Error::Manifest(_))));
}

fn small_model(views: usize) -> ModelParams<f32> {
    let config = ModelConfig { model_dim: 16, num_blocks: 1, embedding_dim: 8, num_views: views, ..ModelConfig::default() };
    ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn checkpoint() -> Checkpoint {
    let params = small_model(3);
    let mut opt = OptState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random::<f32>() - 0.5);
    }
    opt.step = 17;
    Checkpoint { params, optimizer: Some(opt), step: 17, sampler: Some(SamplerConfig { references: 2, points: 6, ..SamplerConfig::default() }) }
}

fn bits(c: &Checkpoint) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = c.params.store.tensors().iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect();
    if let Some(o) = &c.optimizer {
        out.extend(o.m.iter().chain(&o.v).map(|t| t.data().iter().map(|v| v.to_bits()).collect()));
    }
    out
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut ck = checkpoint();
    // values a text format would mangle
    ck.params.store.tensor_mut(0).data_mut()[..4].copy_from_slice(&[f32::MIN_POSITIVE / 3.0, -0.0, f32::MAX, 1.0e-45]);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(bits(&back), bits(&ck));
    assert_eq!(back.params.store.names(), ck.params.store.names());
    assert_eq!(back.params.config, ck.params.config);
    assert_eq!((back.step, &back.sampler), (17, &ck.sampler));
    assert_eq!(back.optimizer.as_ref().unwrap().step, 17);

    let bare = Checkpoint { optimizer: None, sampler: None, ..checkpoint() };
    let back = Checkpoint::from_bytes(&bare.to_bytes()).unwrap();
    assert!(back.optimizer.is_none() && back.sampler.is_none());
    assert_eq!(bits(&back), bits(&bare));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = checkpoint().to_bytes();
    for cut in [0, 5, 19, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptArchive(_))), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() - 40] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptArchive(_))));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&future) {
        Err(e @ Error::VersionMismatch { .. }) => assert!(e.to_string().contains(&format!("version {}", FORMAT_VERSION + 1))),
        other => panic!("{other:?}"),
    }
}

#[test]
fn mismatched_config_names_the_tensor() {
    let ck = checkpoint();
    let wider = ModelConfig { embedding_dim: 12, ..ck.params.config.clone() };
    match ck.params_for(&wider) {
        Err(Error::ShapeMismatch { tensor, expected, found }) => {
            assert_eq!(tensor, "embedding.table");
            assert_eq!((expected, found), ((3, 12), (3, 8)));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(ck.params_for(&ck.params.config).unwrap(), ck.params);
}
