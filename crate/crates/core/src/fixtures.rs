//! Deterministic synthetic fixtures: a randomly initialised 5-class
//! ResNet-18 artifact and radiograph-like knee images with grade-dependent
//! joint-space narrowing, sclerosis and marginal osteophytes.
//!
//! Nothing here is clinically meaningful. The fixtures exist so the runtime,
//! the format and the tooling can be exercised without the real dataset.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grade::{KLGrade, NUM_GRADES};
use crate::kernels::{self, BN_EPSILON};
use crate::model_io::{ModelArtifact, ARCH_KEY};
use crate::preprocess::{prepare, ImageBuffer, PreprocessError};
use crate::resnet::{parameter_manifest, ARCH, STAGE_WIDTHS};
use crate::tensor::{Tensor, TensorError};

/// Uniform half-width of the seeded head initialisation.
pub const HEAD_INIT_RANGE: f32 = 0.01;

/// Builds a complete float32 ResNet-18 artifact from `seed`.
///
/// Convolutions use He-uniform weights. Batch-norm statistics are drawn near
/// identity, with the second norm of each residual branch damped so
/// activations stay in a reasonable range through all eight blocks. The head
/// is uniform in `±head_range`.
pub fn synthetic_resnet18(seed: u64, head_range: f32) -> ModelArtifact {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut art = ModelArtifact::new();
    art.set_meta(ARCH_KEY, ARCH);
    art.set_meta("source", format!("synthetic seed={seed}"));
    for (name, dims) in parameter_manifest() {
        let n: usize = dims.iter().product();
        let mut uniform =
            |lo: f32, hi: f32| -> Vec<f32> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
        let data = if dims.len() == 4 {
            let fan_in = (dims[1] * dims[2] * dims[3]) as f32;
            let bound = (6.0 / fan_in).sqrt();
            uniform(-bound, bound)
        } else if name == "fc.weight" || name == "fc.bias" {
            uniform(-head_range, head_range)
        } else if name.ends_with("running_var") {
            uniform(0.5, 1.5)
        } else if name.ends_with("running_mean") {
            uniform(-0.1, 0.1)
        } else if name.ends_with(".bias") {
            uniform(-0.1, 0.1)
        } else if name.contains(".bn2.") {
            uniform(0.2, 0.4)
        } else {
            uniform(0.8, 1.2)
        };
        art.insert(name, Tensor::from_f32(&dims, data).expect("manifest dims"))
            .expect("manifest names are unique");
    }
    art
}

/// Number of synthetic radiographs used by [`calibrated_resnet18`].
pub const CALIBRATION_IMAGES: usize = 10;

/// [`synthetic_resnet18`] with batch-norm running statistics measured on
/// synthetic radiographs, so activations are centred the way a trained
/// network's would be. Random statistics leave the pooled features nearly
/// identical across images.
pub fn calibrated_resnet18(seed: u64, head_range: f32) -> ModelArtifact {
    let mut art = synthetic_resnet18(seed, head_range);
    let images: Vec<Tensor> = (0..CALIBRATION_IMAGES)
        .map(|i| {
            let grade = KLGrade::from_index(i % NUM_GRADES).expect("index < 5");
            let img = synthetic_radiograph(grade, seed.wrapping_add(90_000 + i as u64), 160, 192);
            prepare(&img, i % 2 == 1).expect("synthetic image is valid")
        })
        .collect();
    calibrate_batchnorm(&mut art, &images).expect("synthetic artifact is complete");
    art.set_meta("source", format!("synthetic seed={seed} bn-calibrated"));
    art
}

/// Replaces every batch-norm `running_mean`/`running_var` with the
/// per-channel statistics of its input over `images`, walking the network
/// in order so each layer sees already-calibrated predecessors.
pub fn calibrate_batchnorm(art: &mut ModelArtifact, images: &[Tensor]) -> Result<(), TensorError> {
    let relu_all = |xs: Vec<Tensor>| -> Result<Vec<Tensor>, TensorError> {
        xs.iter().map(kernels::relu).collect()
    };
    let x = relu_all(calibrated_conv_bn(art, images, "conv1", "bn1", 2, 3)?)?;
    let mut x = x
        .iter()
        .map(|t| kernels::maxpool2d(t, 3, 2, 1))
        .collect::<Result<Vec<_>, _>>()?;
    for s in 1..=STAGE_WIDTHS.len() {
        for b in 0..2 {
            let p = format!("layer{s}.{b}");
            let stride = if s > 1 && b == 0 { 2 } else { 1 };
            let h = calibrated_conv_bn(
                art,
                &x,
                &format!("{p}.conv1"),
                &format!("{p}.bn1"),
                stride,
                1,
            )?;
            let h = calibrated_conv_bn(
                art,
                &relu_all(h)?,
                &format!("{p}.conv2"),
                &format!("{p}.bn2"),
                1,
                1,
            )?;
            let skip = if stride == 2 {
                calibrated_conv_bn(
                    art,
                    &x,
                    &format!("{p}.downsample.0"),
                    &format!("{p}.downsample.1"),
                    2,
                    0,
                )?
            } else {
                x
            };
            x = h
                .iter()
                .zip(&skip)
                .map(|(a, b)| kernels::add(a, b).and_then(|t| kernels::relu(&t)))
                .collect::<Result<_, _>>()?;
        }
    }
    Ok(())
}

fn calibrated_conv_bn(
    art: &mut ModelArtifact,
    xs: &[Tensor],
    conv: &str,
    bn: &str,
    stride: usize,
    padding: usize,
) -> Result<Vec<Tensor>, TensorError> {
    let missing = |name: &str| TensorError::InvalidArgument {
        op: "calibrate_batchnorm",
        reason: format!("missing tensor {name}"),
    };
    let param = |art: &ModelArtifact, name: String| {
        art.get(&name)
            .map(Tensor::to_f32)
            .ok_or_else(|| missing(&name))
    };
    let weight = param(art, format!("{conv}.weight"))?;
    let ys = xs
        .iter()
        .map(|x| kernels::conv2d(x, &weight, None, stride, padding))
        .collect::<Result<Vec<_>, _>>()?;
    let c = weight.dims()[0];
    let (mut sum, mut sq, mut count) = (vec![0f64; c], vec![0f64; c], 0usize);
    for y in &ys {
        let plane = y.dims()[2] * y.dims()[3];
        for (ch, vals) in y.as_f32()?.chunks(plane).enumerate() {
            for &v in vals {
                sum[ch % c] += v as f64;
                sq[ch % c] += (v as f64) * (v as f64);
            }
        }
        count += plane * y.dims()[0];
    }
    let n = count as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let var: Vec<f32> = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| (q / n - (s / n).powi(2)).max(1e-6) as f32)
        .collect();
    let (mean, var) = (Tensor::from_f32(&[c], mean)?, Tensor::from_f32(&[c], var)?);
    art.upsert(&format!("{bn}.running_mean"), mean.clone());
    art.upsert(&format!("{bn}.running_var"), var.clone());
    let gamma = param(art, format!("{bn}.weight"))?;
    let beta = param(art, format!("{bn}.bias"))?;
    ys.iter()
        .map(|y| kernels::batchnorm_infer(y, &gamma, &beta, &mean, &var, BN_EPSILON))
        .collect()
}

/// Joint-space gap as a fraction of image height, narrowing with grade.
fn joint_gap(grade: KLGrade) -> f32 {
    [0.14, 0.11, 0.08, 0.05, 0.025][grade.index()]
}

/// Grayscale knee-radiograph-like image for `grade`.
pub fn synthetic_radiograph(grade: KLGrade, seed: u64, width: usize, height: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (grade.value() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let (w, h) = (width as f32, height as f32);
    let centre_y = h * rng.gen_range(0.46..0.54);
    let centre_x = w * rng.gen_range(0.47..0.53);
    let gap = joint_gap(grade) * h * rng.gen_range(0.9..1.1);
    let bone_level = rng.gen_range(160.0..200.0f32);
    let background = rng.gen_range(15.0..35.0f32);
    let spur = grade.value().saturating_sub(1) as f32 * 0.025 * w;
    // Subchondral sclerosis: a brighter, deeper band next to the joint.
    let g = grade.value() as f32;
    let sclerosis = 20.0 + 15.0 * g;
    let band = (0.04 + 0.02 * g) * h;

    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let yf = y as f32 + 0.5;
        for x in 0..width {
            let xf = x as f32 + 0.5;
            let dy = yf - centre_y;
            // Distance from the joint line into the bone, negative inside the gap.
            let depth = dy.abs() - gap / 2.0;
            let taper = (depth / (0.35 * h)).clamp(0.0, 1.0);
            let half_width = w * (0.32 - 0.12 * taper);
            // Condyles bulge towards the joint.
            let dx = (xf - centre_x) / half_width;
            let condyle = if dx.abs() < 1.0 {
                (1.0 - dx * dx).sqrt() * 0.02 * h
            } else {
                0.0
            };
            let mut inside = dx.abs() <= 1.0 && depth + condyle >= 0.0;
            // Osteophytes: wedges at the joint margins.
            if spur > 0.0 && depth >= -gap * 0.25 && depth < spur {
                let over = dx.abs() - 1.0;
                if over > 0.0 && over * half_width < spur - depth.max(0.0) {
                    inside = true;
                }
            }
            let v = if inside {
                bone_level - 30.0 * taper + sclerosis * (1.0 - (depth / band).clamp(0.0, 1.0))
            } else {
                background
            };
            let noise: f32 = rng.gen_range(-8.0..8.0);
            data.push((v + noise).round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageBuffer::new(width, height, 1, data).expect("dimensions are consistent")
}

/// Writes `root/{train,test}/{grade}/NNNN.png` with the given per-grade counts.
pub fn write_synthetic_dataset(
    root: &Path,
    train_counts: [usize; NUM_GRADES],
    test_counts: [usize; NUM_GRADES],
    seed: u64,
    size: usize,
) -> Result<(), PreprocessError> {
    for (split, counts, salt) in [
        ("train", train_counts, 0u64),
        ("test", test_counts, 1 << 32),
    ] {
        for grade in KLGrade::ALL {
            let dir = root.join(split).join(grade.to_string());
            std::fs::create_dir_all(&dir).map_err(|e| PreprocessError::Unreadable {
                path: dir.clone(),
                source: e,
            })?;
            for i in 0..counts[grade.index()] {
                let img =
                    synthetic_radiograph(grade, seed.wrapping_add(salt + i as u64), size, size);
                img.save_png(&dir.join(format!("{i:04}.png")))?;
            }
        }
    }
    Ok(())
}
