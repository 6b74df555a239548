//! Three-stage convolutional backbone with per-cell class and box heads.
//! Plain `f64` loops; tensors are channel-major `(c, h, w)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::raster::Raster;

use super::AnchorConfig;

/// Total downsampling of the backbone.
pub const NET_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Conv {
    cin: usize,
    cout: usize,
    stride: usize,
    w_off: usize,
    b_off: usize,
}

impl Conv {
    fn len(&self) -> usize {
        self.cout * self.cin * 9 + self.cout
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 - 3) / self.stride + 1
    }

    fn forward(&self, p: &[f64], x: &[f64], ih: usize, iw: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (self.out_size(ih), self.out_size(iw));
        let mut out = vec![0.0; self.cout * oh * ow];
        for co in 0..self.cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            plane.fill(p[self.b_off + co]);
            for ci in 0..self.cin {
                let xin = &x[ci * ih * iw..(ci + 1) * ih * iw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let w = p[self.w_off + ((co * self.cin + ci) * 3 + ky) * 3 + kx];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - 1;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let row = &xin[iy as usize * iw..(iy as usize + 1) * iw];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - 1;
                                if ix >= 0 && ix < iw as isize {
                                    *o += w * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, oh, ow)
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &[f64],
        ih: usize,
        iw: usize,
        dout: &[f64],
        need_dx: bool,
    ) -> Vec<f64> {
        let (oh, ow) = (self.out_size(ih), self.out_size(iw));
        let mut dx = if need_dx {
            vec![0.0; self.cin * ih * iw]
        } else {
            Vec::new()
        };
        for co in 0..self.cout {
            let dplane = &dout[co * oh * ow..(co + 1) * oh * ow];
            g[self.b_off + co] += dplane.iter().sum::<f64>();
            for ci in 0..self.cin {
                let xin = &x[ci * ih * iw..(ci + 1) * ih * iw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wi = self.w_off + ((co * self.cin + ci) * 3 + ky) * 3 + kx;
                        let w = p[wi];
                        let mut gw = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - 1;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - 1;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let d = dplane[oy * ow + ox];
                                gw += d * xin[iy * iw + ix as usize];
                                if need_dx {
                                    dx[(ci * ih + iy) * iw + ix as usize] += w * d;
                                }
                            }
                        }
                        g[wi] += gw;
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TinyDetector {
    pub channels: [usize; 3],
    pub anchors: AnchorConfig,
    pub params: Vec<f64>,
}

/// Raw head outputs in anchor order (row, column, scale, aspect).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub grid: (usize, usize),
    pub logits: Vec<f64>,
    pub offsets: Vec<[f64; 4]>,
}

pub(crate) struct Cache {
    dims: [(usize, usize); 4],
    acts: [Vec<f64>; 4],
    pre: [Vec<f64>; 3],
}

impl TinyDetector {
    /// He-initialized weights, zero biases.
    pub fn new(channels: [usize; 3], anchors: AnchorConfig, seed: u64) -> Self {
        let mut m = Self {
            channels,
            anchors,
            params: Vec::new(),
        };
        let layers = m.layers();
        let total: usize = layers.iter().map(Conv::len).sum();
        m.params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in layers {
            let std = (2.0 / (l.cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut m.params[l.w_off..l.b_off] {
                *w = normal.sample(&mut rng);
            }
        }
        m
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors.scales.len() * self.anchors.aspects.len()
    }

    fn layers(&self) -> [Conv; 5] {
        let a = self.anchors_per_cell();
        let shapes = [
            (1, self.channels[0], 2),
            (self.channels[0], self.channels[1], 2),
            (self.channels[1], self.channels[2], 2),
            (self.channels[2], a, 1),
            (self.channels[2], 4 * a, 1),
        ];
        let mut off = 0;
        shapes.map(|(cin, cout, stride)| {
            let c = Conv {
                cin,
                cout,
                stride,
                w_off: off,
                b_off: off + cout * cin * 9,
            };
            off += c.len();
            c
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(Conv::len).sum()
    }

    pub fn output_grid(width: usize, height: usize) -> (usize, usize) {
        (width.div_ceil(NET_STRIDE), height.div_ceil(NET_STRIDE))
    }

    fn input(img: &Raster) -> Vec<f64> {
        let g = if img.channels() == 1 {
            img.clone()
        } else {
            crate::raster::to_gray(img)
        };
        g.data().iter().map(|v| v / 255.0 - 0.5).collect()
    }

    pub(crate) fn forward_cached(&self, img: &Raster) -> (HeadOutput, Cache) {
        let layers = self.layers();
        let p = &self.params;
        let x0 = Self::input(img);
        let mut dims = [(img.height(), img.width()); 4];
        let mut acts: [Vec<f64>; 4] = [x0, Vec::new(), Vec::new(), Vec::new()];
        let mut pre: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for i in 0..3 {
            let (h, w) = dims[i];
            let (z, oh, ow) = layers[i].forward(p, &acts[i], h, w);
            acts[i + 1] = z.iter().map(|v| v.max(0.0)).collect();
            pre[i] = z;
            dims[i + 1] = (oh, ow);
        }
        let (gh, gw) = dims[3];
        let (cls, _, _) = layers[3].forward(p, &acts[3], gh, gw);
        let (bx, _, _) = layers[4].forward(p, &acts[3], gh, gw);
        let a = self.anchors_per_cell();
        let cells = gh * gw;
        let mut logits = Vec::with_capacity(cells * a);
        let mut offsets = Vec::with_capacity(cells * a);
        for cell in 0..cells {
            for k in 0..a {
                logits.push(cls[k * cells + cell]);
                offsets.push([0, 1, 2, 3].map(|j| bx[(4 * k + j) * cells + cell]));
            }
        }
        (
            HeadOutput {
                grid: (gw, gh),
                logits,
                offsets,
            },
            Cache { dims, acts, pre },
        )
    }

    pub fn forward(&self, img: &Raster) -> HeadOutput {
        self.forward_cached(img).0
    }

    /// Parameter gradient given head-output gradients in anchor order.
    pub(crate) fn backward(&self, cache: &Cache, dlogits: &[f64], doffsets: &[[f64; 4]]) -> Vec<f64> {
        let layers = self.layers();
        let p = &self.params;
        let mut g = vec![0.0; p.len()];
        let a = self.anchors_per_cell();
        let (gh, gw) = cache.dims[3];
        let cells = gh * gw;
        let mut dcls = vec![0.0; a * cells];
        let mut dbox = vec![0.0; 4 * a * cells];
        for cell in 0..cells {
            for k in 0..a {
                let ai = cell * a + k;
                dcls[k * cells + cell] = dlogits[ai];
                for j in 0..4 {
                    dbox[(4 * k + j) * cells + cell] = doffsets[ai][j];
                }
            }
        }
        let mut da = layers[3].backward(p, &mut g, &cache.acts[3], gh, gw, &dcls, true);
        let db = layers[4].backward(p, &mut g, &cache.acts[3], gh, gw, &dbox, true);
        da.iter_mut().zip(db).for_each(|(x, y)| *x += y);
        for i in (0..3).rev() {
            for (d, z) in da.iter_mut().zip(&cache.pre[i]) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            let (h, w) = cache.dims[i];
            da = layers[i].backward(p, &mut g, &cache.acts[i], h, w, &da, i > 0);
        }
        g
    }
}
