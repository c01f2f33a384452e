//! Forward models for conventional stacked metasurfaces, the meta-fiber
//! connected 2-layer SIM (MF-SIM) and the flexible 2-layer FILM.
//!
//! Every architecture maps a [`Configuration`] to a response matrix `G`
//! (aperture atoms x feed antennas). [`SimModel`] caches the couplings that
//! do not depend on the configuration and provides reverse-mode gradients
//! of any real objective through `G`.

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::em::{self, CMatrix, CVector, ComplexCoupling, LayerGeometry, Point};
use crate::error::{Error, Result};

/// Maximum number of layers for a conventional stack.
pub const MAX_LAYERS: usize = 16;

/// Phase-only meta-atom settings for one layer, wrapped to `[0, 2pi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseProfile(Vec<f64>);

impl PhaseProfile {
    pub fn new(phases: Vec<f64>) -> Result<Self> {
        if let Some(i) = phases.iter().position(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("phase {i} is not finite")));
        }
        Ok(Self(phases.into_iter().map(wrap_phase).collect()))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn phasors(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.0.iter().map(|&t| Complex64::from_polar(1.0, t))
    }
}

pub(crate) fn wrap_phase(p: f64) -> f64 {
    let w = p.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// 2-to-1 meta-fiber wiring: second-layer atom `n` combines first-layer
/// atoms `pairs[n].0` and `pairs[n].1`.
#[derive(Clone, Debug, PartialEq)]
pub struct WiredTopology {
    pairs: Vec<(usize, usize)>,
}

impl WiredTopology {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        let first = 2 * pairs.len();
        let mut seen = vec![false; first];
        for (n, &(a, b)) in pairs.iter().enumerate() {
            if a == b {
                return Err(Error::domain(format!("pair {n} wires atom {a} to itself")));
            }
            for idx in [a, b] {
                if idx >= first {
                    return Err(Error::domain(format!(
                        "pair {n} references first-layer atom {idx}, but only {first} exist"
                    )));
                }
                if std::mem::replace(&mut seen[idx], true) {
                    return Err(Error::domain(format!("first-layer atom {idx} is wired twice")));
                }
            }
        }
        Ok(Self { pairs })
    }

    /// Pairs neighbouring first-layer atoms: `(2n, 2n + 1)`.
    pub fn adjacent(second_layer_atoms: usize) -> Self {
        Self {
            pairs: (0..second_layer_atoms).map(|n| (2 * n, 2 * n + 1)).collect(),
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn second_layer_len(&self) -> usize {
        self.pairs.len()
    }

    pub fn first_layer_len(&self) -> usize {
        2 * self.pairs.len()
    }
}

/// Per-atom 3D offsets for one FILM layer, each component within `bound`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementProfile {
    offsets: Vec<Point>,
    bound: f64,
}

impl DisplacementProfile {
    pub fn new(offsets: Vec<Point>, bound: f64) -> Result<Self> {
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(Error::domain(format!("displacement bound must be non-negative, got {bound}")));
        }
        for (i, o) in offsets.iter().enumerate() {
            if o.iter().any(|c| !c.is_finite() || c.abs() > bound) {
                return Err(Error::domain(format!(
                    "offset {i} = ({:e}, {:e}, {:e}) exceeds the {bound:e} m morphing bound",
                    o.x, o.y, o.z
                )));
            }
        }
        Ok(Self { offsets, bound })
    }

    pub fn zeros(n: usize, bound: f64) -> Self {
        Self { offsets: vec![Point::zeros(); n], bound }
    }

    /// Clips every component into `[-bound, bound]`.
    pub fn projected(offsets: Vec<Point>, bound: f64) -> Self {
        let offsets = offsets
            .into_iter()
            .map(|o| o.map(|c| c.clamp(-bound, bound)))
            .collect();
        Self { offsets, bound }
    }

    pub fn offsets(&self) -> &[Point] {
        &self.offsets
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn max_abs_component(&self) -> f64 {
        self.offsets
            .iter()
            .flat_map(|o| o.iter().copied())
            .fold(0.0, |m, c| m.max(c.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArchitectureKind {
    Conventional {
        geometries: Vec<LayerGeometry>,
        inter_layer_gap: f64,
    },
    MfSim {
        topology: WiredTopology,
        /// `[first layer (2N atoms), second layer (N atoms)]`
        geometries: [LayerGeometry; 2],
    },
    Film {
        geometries: [LayerGeometry; 2],
        bound: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub kind: ArchitectureKind,
    /// Power fraction lost at every metasurface traversal.
    pub attenuation_ratio: f64,
}

fn check_attenuation(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::domain(format!("attenuation ratio must lie in [0, 1), got {alpha}")));
    }
    Ok(())
}

impl ArchitectureSpec {
    /// Uniform stack of `num_layers` square grids; layer 1 sits at
    /// `first_z` and the rest follow every `gap` metres.
    pub fn conventional(
        num_layers: usize,
        rows: usize,
        cols: usize,
        lambda: f64,
        first_z: f64,
        gap: f64,
        attenuation_ratio: f64,
    ) -> Result<Self> {
        if !(1..=MAX_LAYERS).contains(&num_layers) {
            return Err(Error::domain(format!("layer count must be in 1..={MAX_LAYERS}, got {num_layers}")));
        }
        if !(gap > 0.0) {
            return Err(Error::domain("inter-layer gap must be positive"));
        }
        let geometries = (0..num_layers)
            .map(|l| LayerGeometry::half_wavelength(rows, cols, lambda, first_z + gap * l as f64))
            .collect::<Result<Vec<_>>>()?;
        let spec = Self {
            kind: ArchitectureKind::Conventional { geometries, inter_layer_gap: gap },
            attenuation_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 2-layer MF-SIM with `rows x cols` output atoms; the first layer holds
    /// two half-width atoms behind every output atom, wired adjacently.
    pub fn mfsim(rows: usize, cols: usize, lambda: f64, first_z: f64, gap: f64, attenuation_ratio: f64) -> Result<Self> {
        let d = lambda / 2.0;
        let first = LayerGeometry::new(rows, 2 * cols, d / 2.0, d * d / 2.0, first_z)?;
        let second = LayerGeometry::new(rows, cols, d, d * d, first_z + gap)?;
        let spec = Self {
            kind: ArchitectureKind::MfSim {
                topology: WiredTopology::adjacent(rows * cols),
                geometries: [first, second],
            },
            attenuation_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn film(
        rows: usize,
        cols: usize,
        lambda: f64,
        first_z: f64,
        gap: f64,
        bound: f64,
        attenuation_ratio: f64,
    ) -> Result<Self> {
        let first = LayerGeometry::half_wavelength(rows, cols, lambda, first_z)?;
        let second = first.with_z(first_z + gap)?;
        let spec = Self {
            kind: ArchitectureKind::Film { geometries: [first, second], bound },
            attenuation_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_attenuation(self.attenuation_ratio)?;
        match &self.kind {
            ArchitectureKind::Conventional { geometries, .. } => {
                if !(1..=MAX_LAYERS).contains(&geometries.len()) {
                    return Err(Error::domain(format!("layer count must be in 1..={MAX_LAYERS}")));
                }
                if geometries.windows(2).any(|w| w[1].z_offset <= w[0].z_offset) {
                    return Err(Error::domain("layers must be ordered by increasing z offset"));
                }
            }
            ArchitectureKind::MfSim { topology, geometries } => {
                if geometries[0].len() != topology.first_layer_len()
                    || geometries[1].len() != topology.second_layer_len()
                {
                    return Err(Error::shape(format!(
                        "MF-SIM layers hold {} and {} atoms but the topology wires {} into {}",
                        geometries[0].len(),
                        geometries[1].len(),
                        topology.first_layer_len(),
                        topology.second_layer_len()
                    )));
                }
            }
            ArchitectureKind::Film { geometries, bound } => {
                if geometries[0].len() != geometries[1].len() {
                    return Err(Error::shape("FILM layers must hold the same number of atoms"));
                }
                if !(*bound >= 0.0) {
                    return Err(Error::domain("morphing bound must be non-negative"));
                }
                // components up to `bound` on both layers must never collide
                if geometries[1].z_offset - geometries[0].z_offset <= 2.0 * bound {
                    return Err(Error::domain("FILM gap must exceed twice the morphing bound"));
                }
            }
        }
        Ok(())
    }

    /// Metasurface traversals along the signal path.
    pub fn traversals(&self) -> usize {
        match &self.kind {
            ArchitectureKind::Conventional { geometries, .. } => geometries.len(),
            ArchitectureKind::MfSim { .. } | ArchitectureKind::Film { .. } => 2,
        }
    }

    /// Amplitude factor `sqrt(1 - alpha)^traversals`.
    pub fn amplitude_scale(&self) -> f64 {
        (1.0 - self.attenuation_ratio).powf(self.traversals() as f64 / 2.0)
    }

    /// Radiating (last) layer.
    pub fn aperture(&self) -> &LayerGeometry {
        match &self.kind {
            ArchitectureKind::Conventional { geometries, .. } => geometries.last().expect("validated"),
            ArchitectureKind::MfSim { geometries, .. } | ArchitectureKind::Film { geometries, .. } => &geometries[1],
        }
    }

    pub fn with_attenuation(&self, attenuation_ratio: f64) -> Result<Self> {
        check_attenuation(attenuation_ratio)?;
        Ok(Self { kind: self.kind.clone(), attenuation_ratio })
    }

    /// Layer sizes of the phase profiles a configuration must carry.
    pub fn phase_layout(&self) -> Vec<usize> {
        match &self.kind {
            ArchitectureKind::Conventional { geometries, .. } => geometries.iter().map(LayerGeometry::len).collect(),
            ArchitectureKind::MfSim { topology, .. } => vec![topology.first_layer_len(), topology.second_layer_len()],
            ArchitectureKind::Film { geometries, .. } => geometries.iter().map(LayerGeometry::len).collect(),
        }
    }
}

/// Tunable state of one architecture instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    pub phases: Vec<PhaseProfile>,
    /// FILM only; empty otherwise.
    pub displacements: Vec<DisplacementProfile>,
}

impl Configuration {
    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        let phases = spec.phase_layout().into_iter().map(PhaseProfile::zeros).collect();
        let displacements = match &spec.kind {
            ArchitectureKind::Film { geometries, bound } => {
                geometries.iter().map(|g| DisplacementProfile::zeros(g.len(), *bound)).collect()
            }
            _ => Vec::new(),
        };
        Self { phases, displacements }
    }

    pub fn num_phases(&self) -> usize {
        self.phases.iter().map(PhaseProfile::len).sum()
    }
}

/// Gradient of a real objective with respect to a [`Configuration`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigGradient {
    pub phases: Vec<Vec<f64>>,
    pub displacements: Vec<Vec<Point>>,
}

impl ConfigGradient {
    pub fn flat_phases(&self) -> Vec<f64> {
        self.phases.iter().flatten().copied().collect()
    }
}

pub fn phase_matrix(profile: &PhaseProfile) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_iterator(profile.len(), profile.phasors()))
}

/// Multiplies row `n` of `m` by `d[n]`.
fn scale_rows(m: &mut CMatrix, d: &[Complex64]) {
    for (n, &s) in d.iter().enumerate() {
        m.row_mut(n).iter_mut().for_each(|z| *z *= s);
    }
}

/// Per-atom gains `g_n = (1 - alpha) e^{i phi_n} (e^{i theta_a} + e^{i theta_b}) / 2`.
pub fn mfsim_response(
    theta_first: &PhaseProfile,
    phi_second: &PhaseProfile,
    topology: &WiredTopology,
    alpha: f64,
) -> Result<CVector> {
    check_attenuation(alpha)?;
    if theta_first.len() != topology.first_layer_len() || phi_second.len() != topology.second_layer_len() {
        return Err(Error::shape(format!(
            "profiles of length {} / {} do not match a topology wiring {} atoms into {}",
            theta_first.len(),
            phi_second.len(),
            topology.first_layer_len(),
            topology.second_layer_len()
        )));
    }
    let th = theta_first.as_slice();
    let ph = phi_second.as_slice();
    Ok(CVector::from_iterator(
        topology.second_layer_len(),
        topology.pairs().iter().zip(ph).map(|(&(a, b), &phi)| {
            let combined = (Complex64::from_polar(1.0, th[a]) + Complex64::from_polar(1.0, th[b])) / 2.0;
            (1.0 - alpha) * Complex64::from_polar(1.0, phi) * combined
        }),
    ))
}

/// Closed-form amplitude-phase synthesis: the first-layer pair splits
/// `arg(t) +- arccos(|t|)` and the second layer stays at zero phase.
pub fn mfsim_synthesize(targets: &[Complex64], topology: &WiredTopology) -> Result<(PhaseProfile, PhaseProfile)> {
    if targets.len() != topology.second_layer_len() {
        return Err(Error::shape(format!(
            "{} targets for a topology with {} output atoms",
            targets.len(),
            topology.second_layer_len()
        )));
    }
    let bad: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| !(t.norm() <= 1.0))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::InfeasibleAmplitude { indices: bad });
    }
    let mut theta = vec![0.0; topology.first_layer_len()];
    for (&(a, b), t) in topology.pairs().iter().zip(targets) {
        let spread = t.norm().min(1.0).acos();
        let centre = if t.norm() == 0.0 { 0.0 } else { t.arg() };
        theta[a] = centre + spread;
        theta[b] = centre - spread;
    }
    Ok((PhaseProfile::new(theta)?, PhaseProfile::zeros(targets.len())))
}

/// Composes the external channel with the SIM response.
pub fn effective_downlink(channel: &CMatrix, sim_output: &CMatrix) -> Result<CMatrix> {
    if channel.ncols() != sim_output.nrows() {
        return Err(Error::shape(format!(
            "channel is {}x{} but the SIM response has {} rows",
            channel.nrows(),
            channel.ncols(),
            sim_output.nrows()
        )));
    }
    Ok(channel * sim_output)
}

/// An architecture bound to a feed array and carrier, with all
/// configuration-independent couplings precomputed.
#[derive(Clone, Debug)]
pub struct SimModel {
    spec: ArchitectureSpec,
    lambda: f64,
    /// Feed -> first metasurface (for MF-SIM: feed -> pair footprints).
    input: CMatrix,
    /// Fixed inter-layer couplings (conventional; FILM at nominal positions).
    inter: Vec<CMatrix>,
    /// Their adjoints, for the backward pass.
    inter_adj: Vec<CMatrix>,
}

/// Cached activations for reverse-mode differentiation.
struct Forward {
    /// Output of every layer after its phase mask, before attenuation.
    layer_out: Vec<CMatrix>,
    /// FILM inter-layer coupling at the displaced positions.
    film_coupling: Option<CMatrix>,
    /// Its derivative with respect to `dst - src` for every entry
    /// (row-major over (dst, src)); only kept when a gradient follows.
    film_kernel_grad: Vec<[Complex64; 3]>,
}

impl SimModel {
    /// Feed-to-first-layer coupling comes from the Rayleigh-Sommerfeld
    /// kernel with the feed elements' own aperture.
    pub fn new(spec: ArchitectureSpec, feeds: &LayerGeometry, lambda: f64) -> Result<Self> {
        spec.validate()?;
        let input = match &spec.kind {
            ArchitectureKind::Conventional { geometries, .. } => em::build_coupling(feeds, &geometries[0], lambda)?,
            ArchitectureKind::MfSim { geometries, .. } => {
                let footprint = geometries[1].with_z(geometries[0].z_offset)?;
                em::build_coupling(feeds, &footprint, lambda)?
            }
            ArchitectureKind::Film { geometries, .. } => em::build_coupling(feeds, &geometries[0], lambda)?,
        };
        Self::with_input(spec, input, lambda)
    }

    /// Uses a caller-supplied feed coupling.
    pub fn with_input(spec: ArchitectureSpec, input: ComplexCoupling, lambda: f64) -> Result<Self> {
        spec.validate()?;
        let input = input.into_matrix();
        let inter = match &spec.kind {
            ArchitectureKind::Conventional { geometries, .. } => geometries
                .windows(2)
                .map(|w| em::build_coupling(&w[0], &w[1], lambda).map(ComplexCoupling::into_matrix))
                .collect::<Result<Vec<_>>>()?,
            ArchitectureKind::Film { geometries, .. } => {
                vec![em::build_coupling(&geometries[0], &geometries[1], lambda)?.into_matrix()]
            }
            ArchitectureKind::MfSim { .. } => Vec::new(),
        };
        let first = match &spec.kind {
            ArchitectureKind::Conventional { geometries, .. } => geometries[0].len(),
            ArchitectureKind::MfSim { topology, .. } => topology.second_layer_len(),
            ArchitectureKind::Film { geometries, .. } => geometries[0].len(),
        };
        if input.nrows() != first {
            return Err(Error::shape(format!(
                "input coupling has {} rows but the first layer needs {first}",
                input.nrows()
            )));
        }
        let inter_adj = inter.iter().map(|w| w.adjoint()).collect();
        Ok(Self { spec, lambda, input, inter, inter_adj })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn input_coupling(&self) -> &CMatrix {
        &self.input
    }

    pub fn num_feeds(&self) -> usize {
        self.input.ncols()
    }

    pub fn aperture_len(&self) -> usize {
        self.spec.aperture().len()
    }

    /// Same couplings, different attenuation.
    pub fn with_attenuation(&self, alpha: f64) -> Result<Self> {
        Ok(Self {
            spec: self.spec.with_attenuation(alpha)?,
            lambda: self.lambda,
            input: self.input.clone(),
            inter: self.inter.clone(),
            inter_adj: self.inter_adj.clone(),
        })
    }

    /// Aperture atom positions, including FILM displacements.
    pub fn aperture_positions(&self, config: &Configuration) -> Vec<Point> {
        let nominal = self.spec.aperture().positions();
        match (&self.spec.kind, config.displacements.get(1)) {
            (ArchitectureKind::Film { .. }, Some(d)) => {
                nominal.iter().zip(d.offsets()).map(|(p, o)| p + o).collect()
            }
            _ => nominal,
        }
    }

    pub fn check_config(&self, config: &Configuration) -> Result<()> {
        let layout = self.spec.phase_layout();
        let got: Vec<usize> = config.phases.iter().map(PhaseProfile::len).collect();
        if got != layout {
            return Err(Error::shape(format!("phase profiles {got:?} do not match layer sizes {layout:?}")));
        }
        if let ArchitectureKind::Film { geometries, bound } = &self.spec.kind {
            if config.displacements.len() != 2 {
                return Err(Error::shape("FILM needs one displacement profile per layer"));
            }
            for (l, (d, g)) in config.displacements.iter().zip(geometries).enumerate() {
                if d.len() != g.len() {
                    return Err(Error::shape(format!("displacement profile {l} has {} atoms, layer has {}", d.len(), g.len())));
                }
                if d.max_abs_component() > *bound {
                    return Err(Error::domain(format!("displacement profile {l} exceeds the {bound:e} m bound")));
                }
            }
        } else if !config.displacements.is_empty() {
            return Err(Error::shape("only FILM configurations carry displacements"));
        }
        Ok(())
    }

    fn film_coupling(&self, config: &Configuration) -> Result<CMatrix> {
        if config.displacements.iter().all(|p| p.max_abs_component() == 0.0) {
            return Ok(self.inter[0].clone());
        }
        let (src, dst, area) = self.film_positions(config);
        Ok(em::coupling_between(&src, &dst, self.lambda, area)?.into_matrix())
    }

    /// Displaced FILM coupling together with every entry's kernel gradient.
    fn film_coupling_with_grad(&self, config: &Configuration) -> Result<(CMatrix, Vec<[Complex64; 3]>)> {
        let (src, dst, area) = self.film_positions(config);
        let mut w = CMatrix::zeros(dst.len(), src.len());
        let mut grads = Vec::with_capacity(dst.len() * src.len());
        for (m, t) in dst.iter().enumerate() {
            for (n, s) in src.iter().enumerate() {
                let delta = t - s;
                if delta.norm() == 0.0 {
                    return Err(Error::Singularity("displaced atoms coincide".into()));
                }
                let (value, g) = em::rs_kernel_with_grad(&delta, self.lambda, area);
                w[(m, n)] = value;
                grads.push(g);
            }
        }
        Ok((w, grads))
    }

    fn film_positions(&self, config: &Configuration) -> (Vec<Point>, Vec<Point>, f64) {
        let ArchitectureKind::Film { geometries, .. } = &self.spec.kind else {
            unreachable!("FILM positions on a non-FILM model");
        };
        let shifted = |l: usize| -> Vec<Point> {
            geometries[l].positions().iter().zip(config.displacements[l].offsets()).map(|(p, o)| p + o).collect()
        };
        (shifted(0), shifted(1), geometries[0].atom_area)
    }

    fn forward(&self, config: &Configuration, with_grad: bool) -> Result<Forward> {
        self.check_config(config)?;
        match &self.spec.kind {
            ArchitectureKind::MfSim { topology, .. } => {
                let g = mfsim_response(&config.phases[0], &config.phases[1], topology, 0.0)?;
                let mut out = self.input.clone();
                scale_rows(&mut out, g.as_slice());
                Ok(Forward { layer_out: vec![out], film_coupling: None, film_kernel_grad: Vec::new() })
            }
            ArchitectureKind::Conventional { .. } | ArchitectureKind::Film { .. } => {
                let (film_coupling, film_kernel_grad) = match self.spec.kind {
                    ArchitectureKind::Film { .. } if with_grad => {
                        let (w, g) = self.film_coupling_with_grad(config)?;
                        (Some(w), g)
                    }
                    ArchitectureKind::Film { .. } => (Some(self.film_coupling(config)?), Vec::new()),
                    _ => (None, Vec::new()),
                };
                let mut layer_out = Vec::with_capacity(config.phases.len());
                let mut x = self.input.clone();
                for (l, profile) in config.phases.iter().enumerate() {
                    if l > 0 {
                        let w = film_coupling.as_ref().unwrap_or(&self.inter[l - 1]);
                        x = em::cmul(w, layer_out.last().expect("previous layer"));
                    }
                    let d: Vec<Complex64> = profile.phasors().collect();
                    scale_rows(&mut x, &d);
                    layer_out.push(x.clone());
                }
                Ok(Forward { layer_out, film_coupling, film_kernel_grad })
            }
        }
    }

    /// End-to-end response `G` (aperture atoms x feeds), attenuation
    /// included.
    pub fn response(&self, config: &Configuration) -> Result<CMatrix> {
        let mut fwd = self.forward(config, false)?;
        let mut g = fwd.layer_out.pop().expect("at least one layer");
        g *= Complex64::from(self.spec.amplitude_scale());
        Ok(g)
    }

    /// Gradient of a real objective `F(G)` given its Wirtinger derivative
    /// `d_g = dF/d(conj G)`, i.e. `dF = 2 Re tr(d_g^H dG)`.
    pub fn backpropagate(&self, config: &Configuration, d_g: &CMatrix) -> Result<ConfigGradient> {
        let fwd = self.forward(config, true)?;
        self.backward(config, &fwd, d_g)
    }

    /// One forward pass feeding `objective`, which returns the value and
    /// its Wirtinger derivative with respect to `G`.
    pub fn value_and_gradient<F>(&self, config: &Configuration, objective: F) -> Result<(f64, ConfigGradient)>
    where
        F: FnOnce(&CMatrix) -> Result<(f64, CMatrix)>,
    {
        let fwd = self.forward(config, true)?;
        let g = fwd.layer_out.last().expect("at least one layer") * Complex64::from(self.spec.amplitude_scale());
        let (value, d_g) = objective(&g)?;
        Ok((value, self.backward(config, &fwd, &d_g)?))
    }

    fn backward(&self, config: &Configuration, fwd: &Forward, d_g: &CMatrix) -> Result<ConfigGradient> {
        let scale = self.spec.amplitude_scale();
        let last = fwd.layer_out.last().expect("at least one layer");
        if d_g.shape() != last.shape() {
            return Err(Error::shape(format!("objective derivative is {:?}, response is {:?}", d_g.shape(), last.shape())));
        }
        match &self.spec.kind {
            ArchitectureKind::MfSim { topology, .. } => {
                let th = config.phases[0].as_slice();
                let ph = config.phases[1].as_slice();
                let mut g_theta = vec![0.0; th.len()];
                let mut g_phi = vec![0.0; ph.len()];
                for (n, &(a, b)) in topology.pairs().iter().enumerate() {
                    // beta_n = sum_j D[n, j] conj(W[n, j]), so dF = 2 Re(conj(beta) dg)
                    let beta: Complex64 = (0..d_g.ncols()).map(|j| d_g[(n, j)] * self.input[(n, j)].conj()).sum();
                    let beta = beta.conj() * scale;
                    let rot = Complex64::from_polar(1.0, ph[n]);
                    let ea = rot * Complex64::from_polar(0.5, th[a]);
                    let eb = rot * Complex64::from_polar(0.5, th[b]);
                    g_theta[a] = -2.0 * (beta * ea).im;
                    g_theta[b] = -2.0 * (beta * eb).im;
                    g_phi[n] = -2.0 * (beta * (ea + eb)).im;
                }
                Ok(ConfigGradient { phases: vec![g_theta, g_phi], displacements: Vec::new() })
            }
            ArchitectureKind::Conventional { .. } | ArchitectureKind::Film { .. } => {
                let layers = config.phases.len();
                let mut phase_grads = vec![Vec::new(); layers];
                let mut displacement_grads = Vec::new();
                let mut u = d_g * Complex64::from(scale);
                for l in (0..layers).rev() {
                    let y = &fwd.layer_out[l];
                    phase_grads[l] = (0..y.nrows())
                        .map(|n| {
                            let s: Complex64 = (0..y.ncols()).map(|j| u[(n, j)].conj() * y[(n, j)]).sum();
                            -2.0 * s.im
                        })
                        .collect();
                    if l == 0 {
                        break;
                    }
                    // adjoint through the phase mask
                    let conj_mask: Vec<Complex64> = config.phases[l].phasors().map(|z| z.conj()).collect();
                    scale_rows(&mut u, &conj_mask);
                    u = match &fwd.film_coupling {
                        Some(w) => {
                            displacement_grads = film_displacement_grad(&fwd.film_kernel_grad, &u, &fwd.layer_out[l - 1]);
                            em::cmul(&w.adjoint(), &u)
                        }
                        None => em::cmul(&self.inter_adj[l - 1], &u),
                    };
                }
                Ok(ConfigGradient { phases: phase_grads, displacements: displacement_grads })
            }
        }
    }
}

/// `u` is the adjoint at the input of layer 2's phase mask, `y_prev` the
/// output of layer 1, `kernel_grad` the per-entry derivative of the
/// displaced coupling.
fn film_displacement_grad(kernel_grad: &[[Complex64; 3]], u: &CMatrix, y_prev: &CMatrix) -> Vec<Vec<Point>> {
    let d_w = u * y_prev.adjoint();
    let (dst, src) = d_w.shape();
    let mut g_src = vec![Point::zeros(); src];
    let mut g_dst = vec![Point::zeros(); dst];
    for m in 0..dst {
        for n in 0..src {
            let dw = &kernel_grad[m * src + n];
            let c = d_w[(m, n)].conj();
            let g = Point::new(2.0 * (c * dw[0]).re, 2.0 * (c * dw[1]).re, 2.0 * (c * dw[2]).re);
            g_dst[m] += g;
            g_src[n] -= g;
        }
    }
    vec![g_src, g_dst]
}

/// Full cascade `G = sqrt(1 - alpha)^L Phi_L W_L ... Phi_1 W_1` with
/// `W_1 = input_coupling`.
pub fn conventional_response(
    spec: &ArchitectureSpec,
    profiles: &[PhaseProfile],
    input_coupling: &ComplexCoupling,
    lambda: f64,
) -> Result<CMatrix> {
    if !matches!(spec.kind, ArchitectureKind::Conventional { .. }) {
        return Err(Error::shape("conventional_response needs a conventional stack"));
    }
    let model = SimModel::with_input(spec.clone(), input_coupling.clone(), lambda)?;
    model.response(&Configuration { phases: profiles.to_vec(), displacements: Vec::new() })
}

/// 2-layer FILM response with the inter-layer coupling rebuilt at the
/// displaced atom positions; the feed coupling stays nominal.
pub fn film_response(
    spec: &ArchitectureSpec,
    profiles: &[PhaseProfile; 2],
    displacements: &[DisplacementProfile; 2],
    input_coupling: &ComplexCoupling,
    lambda: f64,
) -> Result<CMatrix> {
    let ArchitectureKind::Film { bound, .. } = spec.kind else {
        return Err(Error::shape("film_response needs a FILM spec"));
    };
    for (l, d) in displacements.iter().enumerate() {
        if d.max_abs_component() > bound {
            return Err(Error::domain(format!("layer {l} displacement exceeds the {bound:e} m bound")));
        }
    }
    let model = SimModel::with_input(spec.clone(), input_coupling.clone(), lambda)?;
    model.response(&Configuration {
        phases: profiles.to_vec(),
        displacements: displacements.to_vec(),
    })
}

/// Uniform phases in `[0, 2pi)` for every profile of `spec`.
pub fn random_configuration<R: rand::Rng + ?Sized>(spec: &ArchitectureSpec, rng: &mut R) -> Configuration {
    use rand::RngExt;
    let mut config = Configuration::zeros(spec);
    for p in &mut config.phases {
        p.0.iter_mut().for_each(|t| *t = rng.random::<f64>() * TAU);
    }
    config
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;
    use rand::RngExt;

    fn lambda() -> f64 {
        em::wavelength(28e9).unwrap()
    }

    fn feeds(l: f64) -> LayerGeometry {
        LayerGeometry::half_wavelength(1, 4, l, 0.0).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> CMatrix {
        let mut r = rng::substream(seed, &[]);
        CMatrix::from_fn(rows, cols, |_, _| Complex64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5))
    }

    fn max_abs(m: &CMatrix) -> f64 {
        m.iter().fold(0.0, |a, z| a.max(z.norm()))
    }

    #[test]
    fn phase_matrix_special_cases() {
        assert_eq!(phase_matrix(&PhaseProfile::zeros(5)), CMatrix::identity(5, 5));
        let pi = phase_matrix(&PhaseProfile::new(vec![PI; 4]).unwrap());
        assert!(max_abs(&(pi + CMatrix::identity(4, 4))) < 1e-15);
        let mut r = rng::substream(3, &[]);
        let p = PhaseProfile::new((0..50).map(|_| r.random::<f64>() * 40.0 - 20.0).collect()).unwrap();
        let m = phase_matrix(&p);
        assert!(max_abs(&(&m * m.adjoint() - CMatrix::identity(50, 50))) < 1e-12);
        assert!(p.as_slice().iter().all(|t| (0.0..TAU).contains(t)));
    }

    #[test]
    fn wrap_handles_negative_zero_edge() {
        assert_eq!(wrap_phase(-1e-18), 0.0);
        assert_eq!(wrap_phase(TAU), 0.0);
        assert_relative_eq!(wrap_phase(-PI / 2.0), 1.5 * PI);
        assert!(PhaseProfile::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn topology_validation() {
        assert!(WiredTopology::new(vec![(0, 1), (2, 3)]).is_ok());
        assert!(WiredTopology::new(vec![(0, 0), (2, 3)]).is_err());
        assert!(WiredTopology::new(vec![(0, 1), (1, 2)]).is_err());
        assert!(WiredTopology::new(vec![(0, 4), (1, 2)]).is_err());
        let t = WiredTopology::adjacent(3);
        assert_eq!(t.pairs(), &[(0, 1), (2, 3), (4, 5)]);
    }

    #[test]
    fn displacement_bounds() {
        let ok = DisplacementProfile::new(vec![Point::new(2.4e-3, -2.4e-3, 0.0)], 2.4e-3);
        assert!(ok.is_ok());
        let bad = DisplacementProfile::new(vec![Point::new(2.5e-3, 0.0, 0.0)], 2.4e-3);
        assert!(matches!(bad, Err(Error::Domain(_))));
        let p = DisplacementProfile::projected(vec![Point::new(9.0, -9.0, 1e-3)], 2.4e-3);
        assert_eq!(p.offsets()[0], Point::new(2.4e-3, -2.4e-3, 1e-3));
    }

    #[test]
    fn single_layer_identity_coupling_is_phase_mask() {
        let l = lambda();
        let spec = ArchitectureSpec::conventional(1, 2, 2, l, 5e-3, 5e-3, 0.0).unwrap();
        let p = PhaseProfile::new(vec![0.1, 1.0, 2.0, 3.0]).unwrap();
        let g = conventional_response(&spec, &[p.clone()], &ComplexCoupling(CMatrix::identity(4, 4)), l).unwrap();
        assert_eq!(g, phase_matrix(&p));
    }

    #[test]
    fn attenuation_scales_frobenius_norm() {
        let l = lambda();
        let spec0 = ArchitectureSpec::conventional(7, 3, 3, l, 5e-3, 5e-3, 0.0).unwrap();
        let spec1 = spec0.with_attenuation(0.19).unwrap();
        let mut r = rng::substream(11, &[]);
        let cfg = random_configuration(&spec0, &mut r);
        let g0 = SimModel::new(spec0, &feeds(l), l).unwrap().response(&cfg).unwrap();
        let g1 = SimModel::new(spec1, &feeds(l), l).unwrap().response(&cfg).unwrap();
        assert_relative_eq!(g1.norm() / g0.norm(), 0.81f64.powf(3.5), max_relative = 1e-13);
    }

    #[test]
    fn two_layers_zero_phase_is_plain_cascade() {
        let l = lambda();
        let spec = ArchitectureSpec::conventional(2, 3, 3, l, 5e-3, 5e-3, 0.3).unwrap();
        let model = SimModel::new(spec.clone(), &feeds(l), l).unwrap();
        let g = model.response(&Configuration::zeros(&spec)).unwrap();
        let ArchitectureKind::Conventional { geometries, .. } = &spec.kind else { unreachable!() };
        let w2 = em::build_coupling(&geometries[0], &geometries[1], l).unwrap().into_matrix();
        let expect = (w2 * model.input_coupling()) * Complex64::from(0.7);
        assert!(max_abs(&(g - &expect)) < 1e-14 * max_abs(&expect));
    }

    #[test]
    fn conventional_rejects_mismatched_profiles() {
        let l = lambda();
        let spec = ArchitectureSpec::conventional(2, 2, 2, l, 5e-3, 5e-3, 0.0).unwrap();
        let model = SimModel::new(spec, &feeds(l), l).unwrap();
        let bad = Configuration { phases: vec![PhaseProfile::zeros(4)], displacements: vec![] };
        assert!(matches!(model.response(&bad), Err(Error::Shape(_))));
        let wrong_input = ComplexCoupling(CMatrix::zeros(3, 4));
        let spec = ArchitectureSpec::conventional(2, 2, 2, l, 5e-3, 5e-3, 0.0).unwrap();
        assert!(matches!(
            conventional_response(&spec, &[PhaseProfile::zeros(4), PhaseProfile::zeros(4)], &wrong_input, l),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mfsim_combining_examples() {
        let t = WiredTopology::adjacent(1);
        let g = mfsim_response(&PhaseProfile::zeros(2), &PhaseProfile::zeros(1), &t, 0.0).unwrap();
        assert_relative_eq!(g[0].re, 1.0);
        assert_relative_eq!(g[0].im, 0.0);
        for phi in [0.0, 1.0, 4.0] {
            let g = mfsim_response(
                &PhaseProfile::new(vec![0.3 + PI, 0.3]).unwrap(),
                &PhaseProfile::new(vec![phi]).unwrap(),
                &t,
                0.2,
            )
            .unwrap();
            assert!(g[0].norm() < 1e-15);
        }
        let g = mfsim_response(&PhaseProfile::new(vec![2.0 * PI / 3.0, 0.0]).unwrap(), &PhaseProfile::zeros(1), &t, 0.0).unwrap();
        let expect = Complex64::from_polar(0.5, PI / 3.0);
        assert!((g[0] - expect).norm() < 1e-15);
        assert!(mfsim_response(&PhaseProfile::zeros(3), &PhaseProfile::zeros(1), &t, 0.0).is_err());
    }

    #[test]
    fn mfsim_synthesis_examples() {
        let t = WiredTopology::adjacent(1);
        let (th, ph) = mfsim_synthesize(&[Complex64::new(1.0, 0.0)], &t).unwrap();
        assert_eq!(th.as_slice(), &[0.0, 0.0]);
        assert_eq!(ph.as_slice(), &[0.0]);
        let (th, _) = mfsim_synthesize(&[Complex64::new(0.0, 0.0)], &t).unwrap();
        assert_relative_eq!(th.as_slice()[0], PI / 2.0);
        assert_relative_eq!(th.as_slice()[1], 1.5 * PI);
        let target = Complex64::from_polar(0.5, PI / 3.0);
        let (th, ph) = mfsim_synthesize(&[target], &t).unwrap();
        assert_relative_eq!(th.as_slice()[0], 2.0 * PI / 3.0, epsilon = 1e-15);
        assert!(th.as_slice()[1].abs() < 1e-15 || (th.as_slice()[1] - TAU).abs() < 1e-15);
        let back = mfsim_response(&th, &ph, &t, 0.0).unwrap();
        assert!((back[0] - target).norm() < 1e-15);
    }

    #[test]
    fn mfsim_synthesis_reports_infeasible_indices() {
        let t = WiredTopology::adjacent(3);
        let err = mfsim_synthesize(&[Complex64::new(0.2, 0.0), Complex64::new(1.2, 0.0), Complex64::new(0.0, -1.5)], &t).unwrap_err();
        match err {
            Error::InfeasibleAmplitude { indices } => assert_eq!(indices, vec![1, 2]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn film_without_displacement_matches_two_layer_stack() {
        let l = lambda();
        let film = ArchitectureSpec::film(4, 4, l, 5e-3, 5e-3, 2.4e-3, 0.1).unwrap();
        let conv = ArchitectureSpec::conventional(2, 4, 4, l, 5e-3, 5e-3, 0.1).unwrap();
        let mut r = rng::substream(5, &[]);
        let cfg = random_configuration(&film, &mut r);
        let input = em::build_coupling(&feeds(l), &film.aperture().with_z(5e-3).unwrap(), l).unwrap();
        let zeros = [DisplacementProfile::zeros(16, 2.4e-3), DisplacementProfile::zeros(16, 2.4e-3)];
        let gf = film_response(&film, &[cfg.phases[0].clone(), cfg.phases[1].clone()], &zeros, &input, l).unwrap();
        let gc = conventional_response(&conv, &cfg.phases, &input, l).unwrap();
        assert_eq!(gf, gc);
    }

    #[test]
    fn film_translation_invariance_and_bounds() {
        let l = lambda();
        let film = ArchitectureSpec::film(3, 3, l, 5e-3, 5e-3, 2.4e-3, 0.0).unwrap();
        let model = SimModel::new(film.clone(), &feeds(l), l).unwrap();
        let zero = Configuration::zeros(&film);
        let shift = Point::new(1e-3, -0.5e-3, 0.7e-3);
        let mut moved = zero.clone();
        moved.displacements = vec![
            DisplacementProfile::new(vec![shift; 9], 2.4e-3).unwrap(),
            DisplacementProfile::new(vec![shift; 9], 2.4e-3).unwrap(),
        ];
        let w0 = model.film_coupling(&zero).unwrap();
        let w1 = model.film_coupling(&moved).unwrap();
        assert!(max_abs(&(w1 - &w0)) < 1e-12 * max_abs(&w0));
        let input = ComplexCoupling(model.input_coupling().clone());
        let over = [
            DisplacementProfile::projected(vec![Point::new(0.0, 0.0, 3e-3); 9], 3e-3),
            DisplacementProfile::zeros(9, 2.4e-3),
        ];
        let r = film_response(&film, &[PhaseProfile::zeros(9), PhaseProfile::zeros(9)], &over, &input, l);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn film_axial_displacement_regression() {
        // 10x10 layers, 5 mm apart; source atom 0 pushed +1 mm along z
        let l = lambda();
        let film = ArchitectureSpec::film(10, 10, l, 5e-3, 5e-3, 2.4e-3, 0.0).unwrap();
        let model = SimModel::new(film.clone(), &feeds(l), l).unwrap();
        let zero = Configuration::zeros(&film);
        let mut moved = zero.clone();
        let mut offs = vec![Point::zeros(); 100];
        offs[0] = Point::new(0.0, 0.0, 1e-3);
        moved.displacements[0] = DisplacementProfile::new(offs, 2.4e-3).unwrap();
        let w0 = model.film_coupling(&zero).unwrap();
        let w1 = model.film_coupling(&moved).unwrap();
        let diff = &w1 - &w0;
        assert_relative_eq!(diff.column(0).norm(), FILM_AXIAL_1MM_COLUMN_DELTA, max_relative = 1e-10);
        assert!(diff.columns(1, 99).iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn downlink_composition() {
        let g = random_matrix(5, 3, 2);
        assert_eq!(effective_downlink(&CMatrix::identity(5, 5), &g).unwrap(), g);
        assert_eq!(effective_downlink(&CMatrix::zeros(2, 5), &g).unwrap(), CMatrix::zeros(2, 3));
        assert!(matches!(effective_downlink(&CMatrix::zeros(2, 4), &g), Err(Error::Shape(_))));
    }

    #[test]
    fn steering_downlink_regression() {
        // 4 users at (-40, -15, 15, 40) deg, single layer of zero phase fed by a 1x4 ULA
        let l = lambda();
        let spec = ArchitectureSpec::conventional(1, 10, 10, l, 5e-3, 5e-3, 0.0).unwrap();
        let model = SimModel::new(spec.clone(), &feeds(l), l).unwrap();
        let g = model.response(&Configuration::zeros(&spec)).unwrap();
        let pos = spec.aperture().positions();
        let rows: Vec<_> = [-40.0f64, -15.0, 15.0, 40.0]
            .iter()
            .map(|a| em::steering_at(&pos, a.to_radians(), 0.0, l).transpose())
            .collect();
        let s = CMatrix::from_rows(&rows);
        let e = effective_downlink(&s, &g).unwrap();
        assert_eq!(e.shape(), (4, 4));
        assert_relative_eq!(e.norm(), STEERING_DOWNLINK_NORM, max_relative = 1e-10);
    }

    fn linear_objective_grad(model: &SimModel, cfg: &Configuration, c: &CMatrix) -> (f64, ConfigGradient) {
        let g = model.response(cfg).unwrap();
        let f = c.iter().zip(g.iter()).map(|(a, b)| (a.conj() * b).re).sum();
        let d = c * Complex64::from(0.5);
        (f, model.backpropagate(cfg, &d).unwrap())
    }

    fn check_phase_gradient(spec: ArchitectureSpec, seed: u64) {
        let l = lambda();
        let model = SimModel::new(spec.clone(), &feeds(l), l).unwrap();
        let mut r = rng::substream(seed, &[]);
        let cfg = random_configuration(&spec, &mut r);
        let c = random_matrix(model.aperture_len(), 4, seed + 1);
        let (_, grad) = linear_objective_grad(&model, &cfg, &c);
        let h = 1e-6;
        for (layer, g_layer) in grad.phases.iter().enumerate() {
            for idx in [0, g_layer.len() / 2, g_layer.len() - 1] {
                let mut p = cfg.clone();
                let mut m = cfg.clone();
                p.phases[layer].0[idx] += h;
                m.phases[layer].0[idx] -= h;
                let fd = (linear_objective_grad(&model, &p, &c).0 - linear_objective_grad(&model, &m, &c).0) / (2.0 * h);
                let an = g_layer[idx];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "layer {layer} idx {idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn phase_gradients_match_differences() {
        let l = lambda();
        check_phase_gradient(ArchitectureSpec::conventional(3, 3, 3, l, 5e-3, 5e-3, 0.1).unwrap(), 1);
        check_phase_gradient(ArchitectureSpec::mfsim(3, 3, l, 5e-3, 5e-3, 0.2).unwrap(), 2);
        check_phase_gradient(ArchitectureSpec::film(3, 3, l, 5e-3, 5e-3, 2.4e-3, 0.1).unwrap(), 3);
    }

    #[test]
    fn displacement_gradient_matches_differences() {
        let l = lambda();
        let spec = ArchitectureSpec::film(3, 3, l, 5e-3, 5e-3, 2.4e-3, 0.0).unwrap();
        let model = SimModel::new(spec.clone(), &feeds(l), l).unwrap();
        let mut r = rng::substream(8, &[]);
        let mut cfg = random_configuration(&spec, &mut r);
        for d in &mut cfg.displacements {
            let offs = (0..9).map(|_| Point::from_fn(|_, _| (r.random::<f64>() - 0.5) * 2e-3)).collect();
            *d = DisplacementProfile::new(offs, 2.4e-3).unwrap();
        }
        let c = random_matrix(9, 4, 9);
        let (_, grad) = linear_objective_grad(&model, &cfg, &c);
        let h = 1e-9;
        for layer in 0..2 {
            for atom in [0, 4, 8] {
                for axis in 0..3 {
                    let perturb = |sign: f64| {
                        let mut q = cfg.clone();
                        let mut offs = q.displacements[layer].offsets().to_vec();
                        offs[atom][axis] += sign * h;
                        q.displacements[layer] = DisplacementProfile::new(offs, 2.4e-3).unwrap();
                        linear_objective_grad(&model, &q, &c).0
                    };
                    let fd = (perturb(1.0) - perturb(-1.0)) / (2.0 * h);
                    let an = grad.displacements[layer][atom][axis];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "layer {layer} atom {atom} axis {axis}: {fd} vs {an}");
                }
            }
        }
    }

    // Frozen from an independent numpy evaluation of the same closed forms.
    const FILM_AXIAL_1MM_COLUMN_DELTA: f64 = 0.391_593_053_864_839_06;
    const STEERING_DOWNLINK_NORM: f64 = 3.918_346_166_476_712;
}
