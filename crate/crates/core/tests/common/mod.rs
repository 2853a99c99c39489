#![allow(dead_code)]

use dcp_nas::autodiff::ConvGeom;
use dcp_nas::config::RunConfig;
use dcp_nas::data::DatasetSource;
use dcp_nas::Tensor;

/// Small enough that a full search takes a couple of seconds.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.net.init_channels = 4;
    c.net.num_cells = 3;
    c.net.image_size = 6;
    c.data.image_size = 6;
    c.data.source = DatasetSource::SyntheticBlobs {
        samples_per_class: 32,
        sigma: 1.0,
    };
    c.search.batch_size = 16;
    c.search.epochs = 4;
    c.retrain.batch_size = 16;
    c.retrain.epochs = 2;
    c
}

/// Six-loop convolution with explicit bounds checks.
pub fn naive_conv(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
    let (n, c, h, wd) = x.nchw().unwrap();
    let (o, cg, kh, kw) = w.nchw().unwrap();
    assert_eq!(c, cg * geom.groups);
    let (d, p, s) = (geom.dilation as isize, geom.padding as isize, geom.stride as isize);
    let ho = ((h as isize + 2 * p - d * (kh as isize - 1) - 1) / s + 1) as usize;
    let wo = ((wd as isize + 2 * p - d * (kw as isize - 1) - 1) / s + 1) as usize;
    let opg = o / geom.groups;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for icl in 0..cg {
                        let ic = (oc / opg) * cg + icl;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as isize * s - p + ky as isize * d;
                                let ix = ox as isize * s - p + kx as isize * d;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += w.at(&[oc, icl, ky, kx]) * x.at(&[b, ic, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[b, oc, oy, ox], acc);
                }
            }
        }
    }
    out
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
