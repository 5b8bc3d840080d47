//! Multi-granularity egocentric maps: allocentric accumulation of projected
//! ray features, egocentric rendering, semantic hallucination and fusion.

use mgmap_tensor::{BatchStats, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{Point, Pose};
use crate::simulator::Observation;
use crate::world::Bounds;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Nearest,
    Bilinear,
}

/// Which map granularity the fused map is allowed to see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapVariant {
    Multi,
    Semantic,
    Fine,
}

impl std::str::FromStr for MapVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(MapVariant::Multi),
            "semantic" => Ok(MapVariant::Semantic),
            "fine" => Ok(MapVariant::Fine),
            _ => Err(Error::Config(format!(
                "unknown map variant `{s}` (multi, semantic, fine)"
            ))),
        }
    }
}

impl std::str::FromStr for Resample {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Resample::Nearest),
            "bilinear" => Ok(Resample::Bilinear),
            _ => Err(Error::Config(format!(
                "unknown resampling `{s}` (nearest, bilinear)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapSpec {
    pub m: usize,
    pub cell: f64,
    pub c_f: usize,
    pub c_s: usize,
    pub c: usize,
    /// Channels inside the hallucination network.
    pub hidden: usize,
    pub resample: Resample,
}

impl Default for MapSpec {
    fn default() -> Self {
        MapSpec {
            m: 100,
            cell: 0.12,
            c_f: 8,
            c_s: 8,
            c: 32,
            hidden: 8,
            resample: Resample::Nearest,
        }
    }
}

impl MapSpec {
    pub fn cells(&self) -> usize {
        self.m * self.m
    }

    /// Agent-frame offset (x forward, y left) of the center of cell `(i, j)`.
    pub fn cell_offset(&self, i: usize, j: usize) -> Point {
        let h = (self.m / 2) as f64;
        Point::new((h - i as f64) * self.cell, (h - j as f64) * self.cell)
    }

    /// Cell containing an agent-frame point, if on the map.
    pub fn cell_at(&self, p: Point) -> Option<(usize, usize)> {
        let h = (self.m / 2) as f64;
        let i = (h - p.x / self.cell + 0.5).floor();
        let j = (h - p.y / self.cell + 0.5).floor();
        let m = self.m as f64;
        (i >= 0.0 && j >= 0.0 && i < m && j < m).then_some((i as usize, j as usize))
    }
}

/// Per-step projection counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectStats {
    pub written: usize,
    pub dropped: usize,
    pub clamped: usize,
}

/// World-frame map memory anchored at the scene bounds, one cell of margin
/// on every side.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocentricBuffer {
    pub origin: Point,
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    pub c_f: usize,
    /// Cell-major features, `(iy·nx + ix)·c_f + ch`.
    pub feat: Vec<f32>,
    pub count: Vec<u32>,
    /// Latest observed category, `-1` unknown.
    pub gt: Vec<i32>,
    pub seen_free: Vec<bool>,
    pub dropped: usize,
}

impl AllocentricBuffer {
    pub fn new(bounds: &Bounds, cell: f64, c_f: usize) -> Self {
        let size = bounds.size();
        let nx = (size.x / cell).ceil() as usize + 2;
        let ny = (size.y / cell).ceil() as usize + 2;
        AllocentricBuffer {
            origin: Point::new(bounds.min.x - cell, bounds.min.y - cell),
            cell,
            nx,
            ny,
            c_f,
            feat: vec![0.0; nx * ny * c_f],
            count: vec![0; nx * ny],
            gt: vec![-1; nx * ny],
            seen_free: vec![false; nx * ny],
            dropped: 0,
        }
    }

    pub fn cell_of(&self, p: Point) -> Option<usize> {
        let fx = ((p.x - self.origin.x) / self.cell).floor();
        let fy = ((p.y - self.origin.y) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some(fy as usize * self.nx + fx as usize)
    }

    pub fn center(&self, i: usize) -> Point {
        let (ix, iy) = (i % self.nx, i / self.nx);
        Point::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell,
            self.origin.y + (iy as f64 + 0.5) * self.cell,
        )
    }

    pub fn features(&self, i: usize) -> &[f32] {
        &self.feat[i * self.c_f..(i + 1) * self.c_f]
    }

    /// Writes a feature observation into cell `i` by element-wise max.
    pub fn write(&mut self, i: usize, row: &[f32], cat: i32) {
        let dst = &mut self.feat[i * self.c_f..(i + 1) * self.c_f];
        if self.count[i] == 0 {
            dst.copy_from_slice(row);
        } else {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = d.max(v);
            }
        }
        self.count[i] += 1;
        self.gt[i] = cat;
    }

    pub fn observed(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }

    /// Bins every ray hit into the buffer and marks the cells the ray
    /// crossed before it as seen free.
    pub fn project(&mut self, pose: &Pose, obs: &Observation) -> Result<ProjectStats> {
        if obs.feat_dim != self.c_f {
            return Err(Error::Domain(format!(
                "observation has {} feature channels, buffer {}",
                obs.feat_dim, self.c_f
            )));
        }
        let o = pose.position();
        let mut stats = ProjectStats::default();
        for r in 0..obs.n_rays {
            let dir = Point::unit(pose.heading + obs.angles[r]);
            let depth = obs.depth[r];
            let free_to = if obs.is_hit(r) {
                depth - 0.5 * self.cell
            } else {
                depth
            };
            let n = (free_to / (0.5 * self.cell)).floor().max(0.0) as usize;
            for k in 0..=n {
                if let Some(i) = self.cell_of(o.add(dir.scale(k as f64 * 0.5 * self.cell))) {
                    if self.count[i] == 0 {
                        self.seen_free[i] = true;
                    }
                }
            }
            if !obs.is_hit(r) {
                stats.clamped += 1;
                continue;
            }
            match self.cell_of(o.add(dir.scale(depth))) {
                Some(i) => {
                    self.write(i, obs.row(r), obs.cat[r]);
                    self.seen_free[i] = false;
                    stats.written += 1;
                }
                None => {
                    self.dropped += 1;
                    stats.dropped += 1;
                }
            }
        }
        Ok(stats)
    }

    fn bilinear(&self, p: Point, out: &mut [f32]) {
        let gx = (p.x - self.origin.x) / self.cell - 0.5;
        let gy = (p.y - self.origin.y) / self.cell - 0.5;
        let (x0, y0) = (gx.floor(), gy.floor());
        let (tx, ty) = ((gx - x0) as f32, (gy - y0) as f32);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (dx, dy, w) in [
            (0, 0, (1.0 - tx) * (1.0 - ty)),
            (1, 0, tx * (1.0 - ty)),
            (0, 1, (1.0 - tx) * ty),
            (1, 1, tx * ty),
        ] {
            let (x, y) = (x0 as i64 + dx, y0 as i64 + dy);
            if w == 0.0 || x < 0 || y < 0 || x >= self.nx as i64 || y >= self.ny as i64 {
                continue;
            }
            let f = self.features(y as usize * self.nx + x as usize);
            for (o, &v) in out.iter_mut().zip(f) {
                *o += w * v;
            }
        }
    }
}

/// Agent-centered, heading-up crops of the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoView {
    pub m: usize,
    pub c_f: usize,
    /// Channel-first `c_f × m × m`.
    pub feat: Vec<f32>,
    /// Per-cell category, `-1` unknown.
    pub gt: Vec<i32>,
}

impl EgoView {
    pub fn feat_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.c_f, self.m, self.m],
            self.feat.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("consistent view shape")
    }

    pub fn known(&self) -> usize {
        self.gt.iter().filter(|&&c| c >= 0).count()
    }
}

pub fn render_egocentric(buf: &AllocentricBuffer, pose: &Pose, spec: &MapSpec) -> EgoView {
    let (m, c) = (spec.m, buf.c_f);
    let mut view = EgoView {
        m,
        c_f: c,
        feat: vec![0.0; c * m * m],
        gt: vec![-1; m * m],
    };
    let mut tmp = vec![0.0f32; c];
    for i in 0..m {
        for j in 0..m {
            let p = pose.to_world(spec.cell_offset(i, j));
            let k = i * m + j;
            let cell = buf.cell_of(p);
            if let Some(b) = cell {
                view.gt[k] = buf.gt[b];
            }
            match spec.resample {
                Resample::Nearest => {
                    if let Some(b) = cell {
                        for (ch, &v) in buf.features(b).iter().enumerate() {
                            view.feat[ch * m * m + k] = v;
                        }
                    }
                }
                Resample::Bilinear => {
                    buf.bilinear(p, &mut tmp);
                    for (ch, &v) in tmp.iter().enumerate() {
                        view.feat[ch * m * m + k] = v;
                    }
                }
            }
        }
    }
    view
}

/// Convolution followed by batch norm with running statistics.
#[derive(Clone, Copy, Debug)]
pub struct ConvBn {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Pending running-statistics update from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            for (r, &b) in store.tensor_mut(id).data_mut().iter_mut().zip(batch) {
                *r = T::of((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * b.as_f64());
            }
        }
    }
}

fn glorot_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: String,
    o: usize,
    i: usize,
    k: usize,
    rng: &mut impl Rng,
) -> ParamId {
    store.add_glorot(name, &[o, i, k, k], i * k * k, o * k * k, rng)
}

impl ConvBn {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let running_var = store.add(
            format!("{name}/running_var"),
            Tensor::full(vec![cout], T::one()),
            false,
        );
        ConvBn {
            w: glorot_conv(store, format!("{name}/w"), cout, cin, 3, rng),
            gamma: store.add_full(format!("{name}/gamma"), &[cout], 1.0),
            beta: store.add_zeros(format!("{name}/beta"), &[cout]),
            running_mean: store.add(
                format!("{name}/running_mean"),
                Tensor::zeros(vec![cout]),
                false,
            ),
            running_var,
            stride,
            pad: 1,
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let y = g.conv2d(x, w, None, self.stride, self.pad)?;
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        let y = match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(y, gamma, beta, BN_EPS)?;
                updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                y
            }
            Mode::Eval => g.batch_norm_eval(
                y,
                gamma,
                beta,
                store.tensor(self.running_mean).data(),
                store.tensor(self.running_var).data(),
                BN_EPS,
            )?,
        };
        Ok(g.relu(y)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    fn conv<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Affine {
            w: glorot_conv(store, format!("{name}/w"), cout, cin, k, rng),
            b: store.add_zeros(format!("{name}/b"), &[cout]),
        }
    }

    fn conv_t<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Affine {
            w: store.add_glorot(
                format!("{name}/w"),
                &[cin, cout, 3, 3],
                cin * 9,
                cout * 9,
                rng,
            ),
            b: store.add_zeros(format!("{name}/b"), &[cout]),
        }
    }

    fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<(Var, Var)> {
        Ok((g.param(store, self.w)?, g.param(store, self.b)?))
    }
}

/// Hallucination encoder-decoder and the multi-granularity map encoder.
#[derive(Clone, Debug)]
pub struct MapNet {
    pub spec: MapSpec,
    stem: [ConvBn; 3],
    enc: [ConvBn; 2],
    up1: Affine,
    dec1: ConvBn,
    up2: Affine,
    dec2: ConvBn,
    up3: Affine,
    head: Affine,
    fine: Affine,
    semantic: Affine,
    fuse: Affine,
}

/// Scale applied to the initial category-head weights so training starts
/// near a uniform category distribution.
pub const HEAD_INIT_SCALE: f64 = 0.01;

/// Spatial size after a stride-2, pad-1, kernel-3 convolution.
fn half(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Output padding that brings a stride-2 transposed convolution of `from`
/// back up to `to`.
fn out_pad(from: usize, to: usize) -> Result<usize> {
    let base = 2 * (from - 1) + 1;
    match to.checked_sub(base) {
        Some(p @ (0 | 1)) => Ok(p),
        _ => Err(Error::Domain(format!("cannot upsample {from} to {to}"))),
    }
}

impl MapNet {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &MapSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.m < 8 || spec.c < 2 || !spec.c.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "map size {} must be ≥ 8 and fused channels {} even",
                spec.m, spec.c
            )));
        }
        let (f, h, k, c) = (spec.c_f, spec.hidden, spec.c_s, spec.c);
        let p = |s: &str| format!("{prefix}/{s}");
        let stem = [
            ConvBn::register(store, &p("halluc/stem0"), f, h, 2, rng),
            ConvBn::register(store, &p("halluc/stem1"), h, h, 1, rng),
            ConvBn::register(store, &p("halluc/stem2"), h, h, 1, rng),
        ];
        let enc = [
            ConvBn::register(store, &p("halluc/enc0"), h, h, 2, rng),
            ConvBn::register(store, &p("halluc/enc1"), h, h, 2, rng),
        ];
        let up1 = Affine::conv_t(store, &p("halluc/up0"), h, h, rng);
        let dec1 = ConvBn::register(store, &p("halluc/dec0"), 2 * h, h, 1, rng);
        let up2 = Affine::conv_t(store, &p("halluc/up1"), h, h, rng);
        let dec2 = ConvBn::register(store, &p("halluc/dec1"), 2 * h, h, 1, rng);
        let up3 = Affine::conv_t(store, &p("halluc/up2"), h, h, rng);
        let head = Affine::conv(store, &p("halluc/head"), h + f, k, 1, rng);
        store
            .tensor_mut(head.w)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= T::of(HEAD_INIT_SCALE));
        Ok(MapNet {
            spec: spec.clone(),
            stem,
            enc,
            up1,
            dec1,
            up2,
            dec2,
            up3,
            head,
            fine: Affine::conv(store, &p("encoder/fine"), f, c / 2, 3, rng),
            semantic: Affine::conv(store, &p("encoder/semantic"), k, c / 2, 3, rng),
            fuse: Affine::conv(store, &p("encoder/fuse"), c, c, 1, rng),
        })
    }

    /// Per-cell category distribution `[c_s × m × m]` from `mf[c_f × m × m]`.
    pub fn hallucinate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mf: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let m = self.spec.m;
        if g.shape(mf) != [self.spec.c_f, m, m] {
            return Err(Error::Domain(format!(
                "fine map shape {:?}, expected [{}, {m}, {m}]",
                g.shape(mf),
                self.spec.c_f
            )));
        }
        let (s1, s2, s3) = (half(m), half(half(m)), half(half(half(m))));
        let mut x = mf;
        for l in &self.stem {
            x = l.forward(g, store, x, mode, updates)?;
        }
        let skip0 = x;
        let e1 = self.enc[0].forward(g, store, skip0, mode, updates)?;
        let e2 = self.enc[1].forward(g, store, e1, mode, updates)?;
        let (w, b) = self.up1.bind(g, store)?;
        let u = g.conv_transpose2d(e2, w, Some(b), 2, 1, out_pad(s3, s2)?)?;
        let u = g.relu(u)?;
        let u = g.concat(&[u, e1], 0)?;
        let d1 = self.dec1.forward(g, store, u, mode, updates)?;
        let (w, b) = self.up2.bind(g, store)?;
        let u = g.conv_transpose2d(d1, w, Some(b), 2, 1, out_pad(s2, s1)?)?;
        let u = g.relu(u)?;
        let u = g.concat(&[u, skip0], 0)?;
        let d2 = self.dec2.forward(g, store, u, mode, updates)?;
        let (w, b) = self.up3.bind(g, store)?;
        let u = g.conv_transpose2d(d2, w, Some(b), 2, 1, out_pad(s1, m)?)?;
        let u = g.relu(u)?;
        let u = g.concat(&[u, mf], 0)?;
        let (w, b) = self.head.bind(g, store)?;
        let logits = g.conv2d(u, w, Some(b), 1, 0)?;
        Ok(g.softmax(logits, 0)?)
    }

    /// Fused map `[c × m × m]`; `variant` blanks the input of the branch it excludes.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mf: Var,
        ms: Var,
        variant: MapVariant,
    ) -> Result<Var> {
        if g.shape(mf)[1..] != g.shape(ms)[1..] {
            return Err(Error::Domain(format!(
                "fine map {:?} and semantic map {:?} disagree",
                g.shape(mf),
                g.shape(ms)
            )));
        }
        let blank = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            Ok(g.constant(Tensor::zeros(g.shape(v).to_vec()))?)
        };
        let mf = if variant == MapVariant::Semantic {
            blank(g, mf)?
        } else {
            mf
        };
        let ms = if variant == MapVariant::Fine {
            blank(g, ms)?
        } else {
            ms
        };
        let (w, b) = self.fine.bind(g, store)?;
        let a = g.conv2d(mf, w, Some(b), 1, 1)?;
        let a = g.relu(a)?;
        let (w, b) = self.semantic.bind(g, store)?;
        let s = g.conv2d(ms, w, Some(b), 1, 1)?;
        let s = g.relu(s)?;
        let x = g.concat(&[a, s], 0)?;
        let (w, b) = self.fuse.bind(g, store)?;
        Ok(g.conv2d(x, w, Some(b), 1, 0)?)
    }
}

/// Mean cross-entropy over cells with known category. The flag is set when
/// no cell is known (the loss is then 0).
pub fn semantic_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &[i32]) -> Result<(Var, bool)> {
    let (l, known) = g.cross_entropy_per_pixel(pred, gt)?;
    Ok((l, known == 0))
}

/// Fraction of known cells whose most probable category is correct.
pub fn cell_accuracy(probs: &[f32], c_s: usize, gt: &[i32]) -> Option<f64> {
    let hw = gt.len();
    let mut hit = 0usize;
    let mut known = 0usize;
    for (i, &t) in gt.iter().enumerate() {
        if t < 0 {
            continue;
        }
        known += 1;
        let best = (0..c_s)
            .max_by(|&a, &b| {
                probs[a * hw + i]
                    .total_cmp(&probs[b * hw + i])
                    .then(b.cmp(&a))
            })
            .unwrap();
        hit += (best as i32 == t) as usize;
    }
    (known > 0).then(|| hit as f64 / known as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{observe, SimParams};
    use crate::world::Scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray_obs(depth: f64, feat: Vec<f32>) -> Observation {
        Observation {
            n_rays: 1,
            feat_dim: feat.len(),
            feat,
            depth: vec![depth],
            cat: vec![3],
            angles: vec![0.0],
        }
    }

    #[test]
    fn single_ray_writes_one_cell() {
        let b = Bounds {
            min: Point::new(-5.0, -5.0),
            max: Point::new(5.0, 5.0),
        };
        let mut buf = AllocentricBuffer::new(&b, 0.12, 2);
        let st = buf
            .project(&Pose::new(0.0, 0.0, 0.0), &ray_obs(1.0, vec![0.3, 0.7]))
            .unwrap();
        assert_eq!(st.written, 1);
        let i = buf.cell_of(Point::new(1.0, 0.0)).unwrap();
        assert_eq!(buf.observed(), 1);
        assert_eq!(buf.features(i), &[0.3, 0.7]);
        buf.project(&Pose::new(0.0, 0.0, 0.0), &ray_obs(1.0, vec![0.5, 0.1]))
            .unwrap();
        assert_eq!(buf.features(i), &[0.5, 0.7]);
        assert_eq!(buf.gt[i], 3);
    }

    #[test]
    fn agent_cell_is_map_center() {
        let spec = MapSpec::default();
        assert_eq!(spec.cell_offset(50, 50), Point::new(0.0, 0.0));
        assert_eq!(spec.cell_at(Point::new(0.0, 0.0)), Some((50, 50)));
        assert_eq!(spec.cell_at(Point::new(1.2, 0.0)), Some((40, 50)));
        assert_eq!(spec.cell_at(Point::new(0.0, 1.2)), Some((50, 40)));
    }

    #[test]
    fn hallucination_is_normalized() {
        let spec = MapSpec {
            m: 20,
            c: 4,
            ..MapSpec::default()
        };
        let mut store = ParamStore::<f64>::new();
        let net = MapNet::register(
            &mut store,
            "policy/map",
            &spec,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let s = Scene::empty_room(6.0, 6.0, vec![]);
        let pose = Pose::new(3.0, 3.0, 0.4);
        let obs = observe(
            &s,
            &pose,
            &SimParams::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        let mut buf = AllocentricBuffer::new(&s.bounds, spec.cell, 8);
        buf.project(&pose, &obs).unwrap();
        let view = render_egocentric(&buf, &pose, &spec);
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new();
            let mf = g.constant(view.feat_tensor()).unwrap();
            let mut up = vec![];
            let ms = net.hallucinate(&mut g, &store, mf, mode, &mut up).unwrap();
            assert_eq!(g.shape(ms), &[8, 20, 20]);
            let d = g.value(ms).data();
            for i in 0..400 {
                let s: f64 = (0..8).map(|k| d[k * 400 + i]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            let fused = net
                .encode(&mut g, &store, mf, ms, MapVariant::Multi)
                .unwrap();
            assert_eq!(g.shape(fused), &[4, 20, 20]);
        }
    }
}
