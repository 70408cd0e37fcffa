//! Independent scalar-loop oracles and test harness pieces shared by the
//! integration tests. Nothing here calls into the kernels under test.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use koa_core::trainer::FeatureSet;
use koa_core::{KLGrade, ModelArtifact};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Dims4 = [usize; 4];

pub fn rand_vec<R: Rng>(rng: &mut R, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// Five well-separated clusters in `d` dimensions.
pub fn cluster_set(n: usize, d: usize, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..5).map(|_| rand_vec(&mut rng, d, 0.0, 1.0)).collect();
    let mut feats = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % 5;
        feats.extend(centers[k].iter().map(|&c| c + rng.gen_range(-0.25..0.25)));
        labels.push(KLGrade::from_index(k).unwrap());
    }
    FeatureSet::new(d, feats, labels).unwrap()
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

pub fn conv2d(
    x: &[f64],
    [n, c, h, w]: Dims4,
    wt: &[f64],
    [co, ci, kh, kw]: Dims4,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Dims4) {
    assert_eq!(c, ci);
    let (ho, wo) = (
        out_extent(h, kh, stride, pad),
        out_extent(w, kw, stride, pad),
    );
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for i in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + i) * h + iy as usize) * w + ix as usize];
                                acc += xv * wt[((o * ci + i) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * co + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    (out, [n, co, ho, wo])
}

pub fn maxpool(
    x: &[f64],
    [n, c, h, w]: Dims4,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Dims4) {
    let (ho, wo) = (out_extent(h, k, stride, pad), out_extent(w, k, stride, pad));
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        for y in 0..ho {
            for xo in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        let ix = (xo * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            m = m.max(x[(p * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    (out, [n, c, ho, wo])
}

pub fn batchnorm(
    x: &[f64],
    [n, c, h, w]: Dims4,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = x.to_vec();
    for b in 0..n {
        for ch in 0..c {
            let s = gamma[ch] / (var[ch] + eps).sqrt();
            for i in 0..h * w {
                let idx = (b * c + ch) * h * w + i;
                out[idx] = (x[idx] - mean[ch]) * s + beta[ch];
            }
        }
    }
    out
}

pub fn avgpool(x: &[f64], [n, c, h, w]: Dims4) -> Vec<f64> {
    (0..n * c)
        .map(|p| x[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect()
}

pub fn linear(x: &[f64], d: usize, wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let c = bias.len();
    let mut out = Vec::new();
    for row in x.chunks(d) {
        for o in 0..c {
            let mut acc = bias[o];
            for j in 0..d {
                acc += row[j] * wt[o * d + j];
            }
            out.push(acc);
        }
    }
    out
}

pub fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn param(art: &ModelArtifact, name: &str) -> (Vec<f64>, Vec<usize>) {
    let t = art
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .to_f32();
    let v = t.as_f32().unwrap().iter().map(|&x| x as f64).collect();
    (v, t.dims().to_vec())
}

fn conv_named(
    art: &ModelArtifact,
    name: &str,
    x: &[f64],
    d: Dims4,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Dims4) {
    let (w, wd) = param(art, &format!("{name}.weight"));
    conv2d(x, d, &w, [wd[0], wd[1], wd[2], wd[3]], None, stride, pad)
}

fn bn_named(art: &ModelArtifact, name: &str, x: &[f64], d: Dims4) -> Vec<f64> {
    let g = param(art, &format!("{name}.weight")).0;
    let b = param(art, &format!("{name}.bias")).0;
    let m = param(art, &format!("{name}.running_mean")).0;
    let v = param(art, &format!("{name}.running_var")).0;
    batchnorm(x, d, &g, &b, &m, &v, 1e-5)
}

/// Reference ResNet-18 forward pass in f64, straight from the torchvision
/// layer layout. Returns `(features[512], logits[5])`.
pub fn resnet18_forward(art: &ModelArtifact, image: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let (x, d) = conv_named(art, "conv1", &x, [1, 3, 224, 224], 2, 3);
    let mut x = bn_named(art, "bn1", &x, d);
    relu(&mut x);
    let (mut x, mut d) = maxpool(&x, d, 3, 2, 1);
    for stage in 1..=4 {
        for block in 0..2 {
            let p = format!("layer{stage}.{block}");
            let stride = if stage > 1 && block == 0 { 2 } else { 1 };
            let (y, yd) = conv_named(art, &format!("{p}.conv1"), &x, d, stride, 1);
            let mut y = bn_named(art, &format!("{p}.bn1"), &y, yd);
            relu(&mut y);
            let (y, yd) = conv_named(art, &format!("{p}.conv2"), &y, yd, 1, 1);
            let y = bn_named(art, &format!("{p}.bn2"), &y, yd);
            let skip = if stride == 2 {
                let (s, sd) = conv_named(art, &format!("{p}.downsample.0"), &x, d, 2, 0);
                bn_named(art, &format!("{p}.downsample.1"), &s, sd)
            } else {
                x.clone()
            };
            x = y.iter().zip(&skip).map(|(a, b)| a + b).collect();
            relu(&mut x);
            d = yd;
        }
    }
    let feats = avgpool(&x, d);
    let (w, _) = param(art, "fc.weight");
    let (b, _) = param(art, "fc.bias");
    let logits = linear(&feats, 512, &w, &b);
    (feats, logits)
}

/// Minimal HTTP/1.1 responder that counts connections and records request
/// bodies. Each connection gets the next canned response; the last one
/// repeats.
pub struct StubServer {
    pub url: String,
    connections: Arc<AtomicUsize>,
    requests: Arc<Mutex<Vec<(String, String)>>>,
}

pub struct Canned {
    pub status: u16,
    pub body: String,
}

impl StubServer {
    pub fn start(responses: Vec<Canned>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/insights", listener.local_addr().unwrap());
        let connections = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let (c, r) = (connections.clone(), requests.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let n = c.fetch_add(1, Ordering::SeqCst);
                let canned = &responses[n.min(responses.len() - 1)];
                serve(stream, canned, &r);
            }
        });
        Self {
            url,
            connections,
            requests,
        }
    }

    pub fn connections(&self) -> usize {
        self.connections.load(Ordering::SeqCst)
    }

    /// `(authorization header, body)` per request received.
    pub fn requests(&self) -> Vec<(String, String)> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, canned: &Canned, log: &Mutex<Vec<(String, String)>>) -> Option<()> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut len = 0usize;
    let mut auth = String::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            match k.trim().to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().ok()?,
                "authorization" => auth = v.trim().to_string(),
                _ => {}
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    // Record before replying so the client never observes a missing entry.
    log.lock()
        .unwrap()
        .push((auth, String::from_utf8_lossy(&body).into_owned()));
    let mut stream = stream;
    let reply = format!(
        "HTTP/1.1 {} Stub\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        canned.status,
        canned.body.len(),
        canned.body
    );
    stream.write_all(reply.as_bytes()).ok()
}

pub const COMPLETE_RESPONSE: &str = "\
## OVERVIEW
Mild narrowing of the joint space.
## SYMPTOMS
- Pain after activity
- Morning stiffness
## RISK_FACTORS
- Age
## PREVENTIVE_MEASURES
- Low-impact exercise
## AVOID
- Deep squats
";

pub const FIXTURE_MODEL_SEED: u64 = 42;

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Calibrated synthetic backbone with the committed head, which was trained
/// on features of a synthetic dataset (see the README for the commands).
pub fn fixture_model() -> ModelArtifact {
    let mut art = koa_core::fixtures::calibrated_resnet18(
        FIXTURE_MODEL_SEED,
        koa_core::fixtures::HEAD_INIT_RANGE,
    );
    let head = koa_core::model_io::load_from_path(&fixture_path("head.koam")).unwrap();
    koa_core::trainer::LinearHead::from_artifact(&head)
        .unwrap()
        .install_into(&mut art);
    art
}

/// `n` normalized synthetic radiographs cycling through the grades.
pub fn fixture_inputs(n: usize, seed: u64) -> Vec<koa_core::Tensor> {
    (0..n)
        .map(|i| {
            let grade = KLGrade::from_index(i % 5).unwrap();
            let img = koa_core::fixtures::synthetic_radiograph(grade, seed + i as u64, 160, 192);
            koa_core::preprocess::prepare(&img, i % 3 == 0).unwrap()
        })
        .collect()
}
