use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde_json::json;
use swt_core::data::{encode_pgm, encode_ppm, gen_sample, DataConfig, Sample};
use swt_core::eval::{class_names, predict};
use swt_core::{checkpoint, Mode};
use swt_tensor::Tensor;

use crate::manifest::RunManifest;
use crate::{check_image_size, load_data, Which};

const ALPHA: f32 = 0.5;

/// Fully saturated hue for class `c` of `n`, as RGB in `[0, 1]`.
fn hue(c: usize, n: usize) -> [f32; 3] {
    let h = 6.0 * c as f32 / n as f32;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Nearest-neighbour lookup of channel `c` of a `[K, P, P]` map at pixel `(y, x)`
/// of an `h × w` image.
fn sample_map(maps: &Tensor<f32>, c: usize, y: usize, x: usize, h: usize, w: usize) -> f32 {
    let (ph, pw) = (maps.shape()[1], maps.shape()[2]);
    maps.get(&[c, y * ph / h, x * pw / w])
}

/// One 8-bit channel image per map channel, values scaled to 0..=255.
pub fn channel_pgms(maps: &Tensor<f32>, h: usize, w: usize) -> Vec<Vec<u8>> {
    (0..maps.shape()[0])
        .map(|c| {
            let px: Vec<u8> = (0..h * w)
                .map(|i| (sample_map(maps, c, i / w, i % w, h, w).clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            encode_pgm(w, h, &px)
        })
        .collect()
}

/// Colours each pixel by its strongest foreground class, weighted by that
/// class's activation, and blends the result onto the image. A trailing
/// background channel gets no colour.
pub fn overlay(image: &Tensor<f32>, maps: &Tensor<f32>, num_classes: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (mut best, mut val) = (0, f32::NEG_INFINITY);
            for c in 0..maps.shape()[0] {
                let v = sample_map(maps, c, y, x, h, w);
                if v > val {
                    (best, val) = (c, v);
                }
            }
            let color = if best < num_classes { hue(best, num_classes) } else { [0.0; 3] };
            for (ch, tint) in color.iter().enumerate() {
                let base = image.get(&[ch, y, x]);
                out.set(&[ch, y, x], (1.0 - ALPHA) * base + ALPHA * tint * val.clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn find_sample(data: Option<&Path>, id: u64, image_size: usize) -> Result<Sample> {
    match data {
        Some(dir) => load_data(dir)?
            .samples
            .into_iter()
            .find(|s| s.id == id)
            .ok_or_else(|| anyhow!("no sample with id {id} in {}", dir.display())),
        None => Ok(gen_sample(id, &DataConfig::for_image(image_size))?),
    }
}

pub fn cmd_heatmap(ckpt: &Path, id: u64, which: Which, out: &Path, data: Option<&Path>) -> Result<RunManifest> {
    let (model, store) = checkpoint::load(ckpt)?.restore()?;
    if which == Which::Rcam && model.mode != Mode::V2 {
        return Err(swt_core::Error::Incompatible("refined maps need a V2 checkpoint".into()).into());
    }
    let sample = find_sample(data, id, model.config.image_size)?;
    check_image_size(&model, Some(sample.image.shape()[1]))?;
    let pred = predict(&model, &store, &sample.image, &sample.labels)?;
    let (maps, tag) = match which {
        Which::Cam => (&pred.cam, "cam"),
        Which::Rcam => (&pred.seeds, "rcam"),
    };
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let names = class_names(model.config.num_classes);

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    for (c, pgm) in channel_pgms(maps, h, w).into_iter().enumerate() {
        let path = out.join(format!("{id:06}_{tag}_{}.pgm", names[c]));
        std::fs::write(&path, pgm).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path);
    }
    let path = out.join(format!("{id:06}_{tag}_overlay.ppm"));
    let blended = overlay(&sample.image, maps, model.config.num_classes);
    std::fs::write(&path, encode_ppm(&blended)?).with_context(|| format!("writing {}", path.display()))?;
    outputs.push(path);

    let mut inputs = vec![ckpt.to_path_buf()];
    inputs.extend(data.map(Path::to_path_buf));
    Ok(RunManifest::new(
        "heatmap",
        &json!({ "model": model.config, "mode": model.mode, "image_id": id, "which": tag }),
        inputs,
        outputs,
        out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_scaling_endpoints() {
        let maps = Tensor::from_f64(&[2, 2, 2], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.25]).unwrap();
        let pgms = channel_pgms(&maps, 4, 4);
        let header = b"P5\n4 4\n255\n";
        assert!(pgms[0].starts_with(header) && pgms[0][header.len()..].iter().all(|&v| v == 0));
        let px = &pgms[1][header.len()..];
        assert_eq!(px.len(), 16);
        assert_eq!((px[0], px[2], px[8], px[15]), (255, 128, 0, 64));
    }

    #[test]
    fn overlay_keeps_size_and_halves_unactivated_pixels() {
        let img = Tensor::full(&[3, 8, 8], 0.8);
        let maps = Tensor::zeros(&[3, 2, 2]);
        let o = overlay(&img, &maps, 2);
        assert_eq!(o.shape(), [3, 8, 8]);
        assert!(o.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn hues_are_distinct() {
        let hs: Vec<[f32; 3]> = (0..4).map(|c| hue(c, 4)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(hs[i], hs[j]);
            }
        }
    }
}
