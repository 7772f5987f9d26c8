//! Loading trunk weights from safetensors files.

use std::collections::HashMap;
use std::path::Path;

use mapinv_core::{Backbone, Error, ImageBuffer, LayerId};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

/// Raw tensors of a saved file, by name.
fn read_tensors(path: &Path) -> HashMap<String, (Dtype, Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path).unwrap();
    let st = SafeTensors::deserialize(&bytes).unwrap();
    st.tensors()
        .into_iter()
        .map(|(name, t)| (name, (t.dtype(), t.shape().to_vec(), t.data().to_vec())))
        .collect()
}

fn write_tensors(path: &Path, tensors: &HashMap<String, (Dtype, Vec<usize>, Vec<u8>)>) {
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(k, (d, s, b))| (k.clone(), TensorView::new(*d, s.clone(), b).unwrap()))
        .collect();
    safetensors::serialize_to_file(views, None, path).unwrap();
}

fn saved_synthetic(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("vgg.safetensors");
    Backbone::vgg19_synthetic(3).save_safetensors(&path).unwrap();
    path
}

#[test]
fn load_is_deterministic_and_matches_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_synthetic(dir.path());
    let a = Backbone::load(&path).unwrap();
    let b = Backbone::load(&path).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.checksum().unwrap().len(), 64);

    let img = ImageBuffer::zeros(16, 16).unwrap();
    let relu = LayerId::relu(3, 1).unwrap();
    let loaded = a.extract_codes(&img, &[relu]).unwrap().remove(&relu).unwrap();
    let source = Backbone::vgg19_synthetic(3)
        .extract_codes(&img, &[relu])
        .unwrap()
        .remove(&relu)
        .unwrap();
    let scale = source.values().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let diff = (loaded.values() - source.values())
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    // weights are stored as f32
    assert!(diff <= 1e-5 * scale, "{diff} vs {scale}");
}

#[test]
fn f64_tensors_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_synthetic(dir.path());
    let mut t = read_tensors(&path);
    for (dtype, _, bytes) in t.values_mut() {
        *bytes = bytes
            .chunks_exact(4)
            .flat_map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())).to_le_bytes())
            .collect();
        *dtype = Dtype::F64;
    }
    let wide = dir.path().join("wide.safetensors");
    write_tensors(&wide, &t);
    let a = Backbone::load(&path).unwrap();
    let b = Backbone::load(&wide).unwrap();
    let img = ImageBuffer::zeros(8, 8).unwrap();
    let relu = LayerId::relu(2, 2).unwrap();
    assert_eq!(
        a.extract_codes(&img, &[relu]).unwrap()[&relu],
        b.extract_codes(&img, &[relu]).unwrap()[&relu]
    );
}

#[test]
fn truncated_weights_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_synthetic(dir.path());
    let full = read_tensors(&path);

    let mut missing = full.clone();
    missing.remove("features.34.weight");
    let p = dir.path().join("missing.safetensors");
    write_tensors(&p, &missing);
    assert!(matches!(Backbone::load(&p), Err(Error::MissingTensor(name)) if name == "features.34.weight"));

    let mut short = full.clone();
    let (_, shape, bytes) = short.get_mut("features.0.weight").unwrap();
    shape[0] = 32;
    bytes.truncate(32 * 3 * 9 * 4);
    let p = dir.path().join("short.safetensors");
    write_tensors(&p, &short);
    assert!(matches!(Backbone::load(&p), Err(Error::ShapeMismatch { .. })));

    let mut ints = full;
    let (dtype, _, _) = ints.get_mut("features.2.bias").unwrap();
    *dtype = Dtype::I32;
    let p = dir.path().join("ints.safetensors");
    write_tensors(&p, &ints);
    assert!(matches!(Backbone::load(&p), Err(Error::UnsupportedDtype { .. })));

    let p = dir.path().join("garbage.safetensors");
    std::fs::write(&p, b"definitely not a safetensors file").unwrap();
    assert!(matches!(Backbone::load(&p), Err(Error::Safetensors(_))));
}
