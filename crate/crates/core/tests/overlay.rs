use ivtrust::explain::{overlay, save_overlay};
use ivtrust::tensor::Tensor;
use sha2::{Digest, Sha256};

const GOLDEN: &str = "ddf01a52c165aa91873de921629561d7872af61769f3d92336a924d31878000f";

fn fixture() -> (Tensor, Vec<f64>) {
    let (h, w) = (5, 7);
    let data = (0..h * w * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let heat = (0..h * w).map(|k| (k % w) as f64 / (w - 1) as f64 * (k / w) as f64 / (h - 1) as f64).collect();
    (Tensor::new(vec![h, w, 3], data).unwrap(), heat)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn overlay_pixels_match_golden_hash() {
    let (img, heat) = fixture();
    let out = overlay(&img, &heat, 0.5).unwrap();
    assert_eq!(hex(&Sha256::digest(out.as_raw())), GOLDEN);
}

#[test]
fn saved_png_decodes_to_the_same_pixels() {
    let (img, heat) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.png");
    save_overlay(&img, &heat, 0.5, &path).unwrap();
    let back = image::open(&path).unwrap().to_rgb8();
    assert_eq!(back.as_raw(), overlay(&img, &heat, 0.5).unwrap().as_raw());
}

#[test]
fn alpha_zero_keeps_the_image() {
    let (img, heat) = fixture();
    let out = overlay(&img, &heat, 0.0).unwrap();
    for (a, b) in out.as_raw().iter().zip(img.data()) {
        assert_eq!(*a, (b * 255.0).round() as u8);
    }
}
