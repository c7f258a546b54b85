//! Per-peer time series, message statistics and plot export.
//!
//! Speeds are integers straight from the status log, so acceleration is kept
//! as an exact `(dv, dt)` pair and only turned into a float for display.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::logs::{Direction, MessageKind, Timestamp, VerboseRecord};
use crate::store::{Store, StoreError, Window};

/// A step is stable when `|a| < cap / STABILITY_DIVISOR` per second, i.e.
/// under 5% of the cap.
pub const STABILITY_DIVISOR: u64 = 20;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown peer {0}")]
    UnknownPeer(i64),
    #[error("no status samples in window")]
    EmptyWindow,
    #[error("series needs at least two points, got {0}")]
    SeriesTooShort(usize),
    #[error("sessions do not overlap")]
    DisjointWindows,
    #[error(transparent)]
    Store(StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<StoreError> for AnalysisError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownPeer(p) => AnalysisError::UnknownPeer(p),
            other => AnalysisError::Store(other),
        }
    }
}

/// Which status column a series follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flow {
    Down,
    Up,
}

impl Flow {
    pub fn token(self) -> &'static str {
        match self {
            Flow::Down => "down",
            Flow::Up => "up",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeedPoint {
    /// Seconds from the first status sample of the session.
    pub t: i64,
    /// Bytes per second.
    pub v: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeedSeries {
    pub peer_id: i64,
    pub flow: Flow,
    pub session_start: Timestamp,
    /// Offset of the first sample reporting a complete download.
    pub completed_at: Option<i64>,
    pub points: Vec<SpeedPoint>,
}

impl SpeedSeries {
    pub fn from_points(peer_id: i64, flow: Flow, points: Vec<SpeedPoint>) -> Self {
        SpeedSeries { peer_id, flow, session_start: Timestamp(0), completed_at: None, points }
    }

    /// Samples from the first nonzero speed up to, but excluding, the
    /// completion sample (which only carries the remainder of the file).
    pub fn transfer_phase(&self) -> SpeedSeries {
        let end = match self.completed_at {
            Some(c) => self.points.partition_point(|p| p.t < c),
            None => self.points.len(),
        };
        let start = self.points[..end].iter().position(|p| p.v > 0).unwrap_or(end);
        SpeedSeries { points: self.points[start..end].to_vec(), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccelPoint {
    pub t: i64,
    pub dv: i64,
    pub dt: u64,
}

impl AccelPoint {
    /// Bytes per second squared.
    pub fn value(&self) -> f64 {
        self.dv as f64 / self.dt as f64
    }

    /// `|dv| / dt < cap / STABILITY_DIVISOR`, without rounding.
    pub fn is_stable(&self, cap: u64) -> bool {
        u128::from(self.dv.unsigned_abs()) * u128::from(STABILITY_DIVISOR) < u128::from(cap) * u128::from(self.dt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccelSeries {
    pub peer_id: i64,
    pub flow: Flow,
    pub points: Vec<AccelPoint>,
}

impl AccelSeries {
    /// `Σ a·Δt`, which telescopes to `v(end) - v(start)`.
    pub fn integral(&self) -> i64 {
        self.points.iter().map(|p| p.dv).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageStats {
    pub peer_id: i64,
    pub window: Window,
    /// kind -> (sent, received); every kind is present.
    pub counts: BTreeMap<MessageKind, (u64, u64)>,
}

impl MessageStats {
    pub fn total(&self) -> u64 {
        self.counts.values().map(|(s, r)| s + r).sum()
    }

    pub fn sent(&self, kind: MessageKind) -> u64 {
        self.counts[&kind].0
    }

    pub fn received(&self, kind: MessageKind) -> u64 {
        self.counts[&kind].1
    }
}

pub fn speed_series(
    store: &Store,
    peer_id: i64,
    flow: Flow,
    window: Option<Window>,
) -> Result<SpeedSeries, AnalysisError> {
    let Some((first, _)) = store.status_span(peer_id)? else {
        return Err(AnalysisError::EmptyWindow);
    };
    let records = store.query_status(peer_id, window.unwrap_or_else(Window::all))?;
    if records.is_empty() {
        return Err(AnalysisError::EmptyWindow);
    }
    let mut points: Vec<SpeedPoint> = Vec::with_capacity(records.len());
    let mut completed_at = None;
    for r in &records {
        let t = r.timestamp.0 - first.0;
        // A repeated timestamp keeps its first sample.
        if points.last().is_some_and(|p| p.t == t) {
            continue;
        }
        if completed_at.is_none() && r.percent.is_complete() {
            completed_at = Some(t);
        }
        let v = match flow {
            Flow::Down => r.down_speed,
            Flow::Up => r.up_speed,
        };
        points.push(SpeedPoint { t, v });
    }
    Ok(SpeedSeries { peer_id, flow, session_start: first, completed_at, points })
}

/// Forward difference: `a(t_i) = (v(t_{i+1}) - v(t_i)) / (t_{i+1} - t_i)`.
pub fn acceleration_series(speed: &SpeedSeries) -> Result<AccelSeries, AnalysisError> {
    if speed.points.len() < 2 {
        return Err(AnalysisError::SeriesTooShort(speed.points.len()));
    }
    let points = speed
        .points
        .windows(2)
        .map(|w| AccelPoint {
            t: w[0].t,
            dv: w[1].v as i64 - w[0].v as i64,
            dt: (w[1].t - w[0].t) as u64,
        })
        .collect();
    Ok(AccelSeries { peer_id: speed.peer_id, flow: speed.flow, points })
}

pub fn message_stats(store: &Store, peer_id: i64, window: Window) -> Result<MessageStats, AnalysisError> {
    let mut counts: BTreeMap<MessageKind, (u64, u64)> = MessageKind::ALL.iter().map(|&k| (k, (0, 0))).collect();
    for (dir, kind, n) in store.message_counts(peer_id, window)? {
        let slot = counts.get_mut(&kind).expect("all kinds present");
        match dir {
            Direction::Sent => slot.0 += n,
            Direction::Received => slot.1 += n,
        }
    }
    Ok(MessageStats { peer_id, window, counts })
}

/// Start of the stable phase: the earliest sample after which every
/// acceleration is below the stability threshold. `None` when the last
/// step is still unstable.
pub fn detect_bootstrap(accel: &AccelSeries, cap: u64) -> Result<Option<i64>, AnalysisError> {
    if accel.points.is_empty() {
        return Err(AnalysisError::SeriesTooShort(accel.points.len() + 1));
    }
    let stable_tail = accel.points.iter().rev().take_while(|p| p.is_stable(cap)).count();
    if stable_tail == 0 {
        return Ok(None);
    }
    let first_stable = accel.points.len() - stable_tail;
    Ok(Some(accel.points[first_stable].t))
}

/// Ramp and plateau of a transfer phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub ramp_end: i64,
    /// Every acceleration before `ramp_end` is strictly positive.
    pub monotone_ramp: bool,
    pub mean: f64,
    pub samples: usize,
    pub max_abs_accel: f64,
}

/// Splits a series at its bootstrap end. `None` when it never settles.
pub fn plateau(speed: &SpeedSeries, cap: u64) -> Result<Option<Plateau>, AnalysisError> {
    let accel = acceleration_series(speed)?;
    let Some(ramp_end) = detect_bootstrap(&accel, cap)? else {
        return Ok(None);
    };
    let flat: Vec<u64> = speed.points.iter().filter(|p| p.t >= ramp_end).map(|p| p.v).collect();
    let mean = flat.iter().sum::<u64>() as f64 / flat.len() as f64;
    let monotone_ramp = accel.points.iter().filter(|p| p.t < ramp_end).all(|p| p.dv > 0);
    let max_abs_accel = accel
        .points
        .iter()
        .filter(|p| p.t >= ramp_end)
        .map(|p| p.value().abs())
        .fold(0.0, f64::max);
    Ok(Some(Plateau { ramp_end, monotone_ramp, mean, samples: flat.len(), max_abs_accel }))
}

/// Two peers over their common window.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub window: Window,
    pub a: SpeedSeries,
    pub b: SpeedSeries,
    /// `(seconds from window start, v_a, v_b)` where both peers have a sample.
    pub pairs: Vec<(i64, u64, u64)>,
    pub stats_a: MessageStats,
    pub stats_b: MessageStats,
}

impl Comparison {
    /// Ratio of mean speeds over the paired samples.
    pub fn mean_ratio(&self) -> Option<f64> {
        let sa: u64 = self.pairs.iter().map(|p| p.1).sum();
        let sb: u64 = self.pairs.iter().map(|p| p.2).sum();
        (sb > 0).then(|| sa as f64 / sb as f64)
    }
}

pub fn compare(
    store: &Store,
    peer_a: i64,
    peer_b: i64,
    flow: Flow,
    window: Option<Window>,
) -> Result<Comparison, AnalysisError> {
    let span_a = store.status_span(peer_a)?.ok_or(AnalysisError::DisjointWindows)?;
    let span_b = store.status_span(peer_b)?.ok_or(AnalysisError::DisjointWindows)?;
    let mut start = span_a.0.max(span_b.0);
    let mut end = Timestamp(span_a.1.min(span_b.1).0 + 1);
    if let Some(w) = window {
        start = start.max(w.start);
        end = end.min(w.end);
    }
    if end <= start {
        return Err(AnalysisError::DisjointWindows);
    }
    let common = Window::new(start, end);
    let a = speed_series(store, peer_a, flow, Some(common))?;
    let b = speed_series(store, peer_b, flow, Some(common))?;
    let by_time: HashMap<i64, u64> = b.points.iter().map(|p| (b.session_start.0 + p.t, p.v)).collect();
    let pairs = a
        .points
        .iter()
        .filter_map(|p| {
            let abs = a.session_start.0 + p.t;
            by_time.get(&abs).map(|&vb| (abs - start.0, p.v, vb))
        })
        .collect();
    Ok(Comparison {
        window: common,
        stats_a: message_stats(store, peer_a, common)?,
        stats_b: message_stats(store, peer_b, common)?,
        a,
        b,
        pairs,
    })
}

/// A piece received from a remote while that remote had us choked.
/// Intervals follow log order, so a choke and a piece in the same second
/// are ordered as logged.
pub fn pieces_while_choked(records: &[VerboseRecord]) -> Vec<&VerboseRecord> {
    let mut choked: HashMap<&str, bool> = HashMap::new();
    let mut bad = Vec::new();
    for r in records.iter().filter(|r| r.direction == Direction::Received) {
        match r.kind {
            MessageKind::Choke => {
                choked.insert(&r.remote_peer, true);
            }
            MessageKind::Unchoke => {
                choked.insert(&r.remote_peer, false);
            }
            // Peers start out choked.
            MessageKind::Piece if *choked.get(r.remote_peer.as_str()).unwrap_or(&true) => bad.push(r),
            _ => {}
        }
    }
    bad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotFormat {
    Csv,
    Svg,
}

impl PlotFormat {
    pub fn extension(self) -> &'static str {
        match self {
            PlotFormat::Csv => "csv",
            PlotFormat::Svg => "svg",
        }
    }
}

/// Anything that can be written as a CSV table and an SVG chart.
pub trait PlotData {
    fn title(&self) -> String;
    fn csv(&self) -> String;
    fn svg(&self) -> String;
}

pub fn export_plot(data: &dyn PlotData, format: PlotFormat, path: &Path) -> Result<(), AnalysisError> {
    let body = match format {
        PlotFormat::Csv => data.csv(),
        PlotFormat::Svg => data.svg(),
    };
    std::fs::write(path, body)?;
    Ok(())
}

impl PlotData for SpeedSeries {
    fn title(&self) -> String {
        format!("peer {} {} speed (B/s)", self.peer_id, self.flow.token())
    }

    fn csv(&self) -> String {
        let mut out = String::from("t,v\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p.t, p.v);
        }
        out
    }

    fn svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.t as f64, p.v as f64)).collect();
        line_chart(&self.title(), &[("v", &pts)])
    }
}

impl PlotData for AccelSeries {
    fn title(&self) -> String {
        format!("peer {} {} acceleration (B/s^2)", self.peer_id, self.flow.token())
    }

    fn csv(&self) -> String {
        let mut out = String::from("t,dv,dt,a\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{}", p.t, p.dv, p.dt, p.value());
        }
        out
    }

    fn svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.t as f64, p.value())).collect();
        line_chart(&self.title(), &[("a", &pts)])
    }
}

impl PlotData for MessageStats {
    fn title(&self) -> String {
        format!("peer {} messages", self.peer_id)
    }

    fn csv(&self) -> String {
        let mut out = String::from("kind,sent,received\n");
        for (kind, (s, r)) in &self.counts {
            let _ = writeln!(out, "{kind},{s},{r}");
        }
        out
    }

    fn svg(&self) -> String {
        let bars: Vec<(String, u64)> = self
            .counts
            .iter()
            .flat_map(|(k, (s, r))| [(format!("{k} sent"), *s), (format!("{k} rcvd"), *r)])
            .collect();
        bar_chart(&self.title(), &bars)
    }
}

impl PlotData for Comparison {
    fn title(&self) -> String {
        format!("peers {} vs {} {} speed (B/s)", self.a.peer_id, self.b.peer_id, self.a.flow.token())
    }

    fn csv(&self) -> String {
        let mut out = String::from("t,a,b\n");
        for (t, a, b) in &self.pairs {
            let _ = writeln!(out, "{t},{a},{b}");
        }
        out
    }

    fn svg(&self) -> String {
        let a: Vec<(f64, f64)> = self.pairs.iter().map(|p| (p.0 as f64, p.1 as f64)).collect();
        let b: Vec<(f64, f64)> = self.pairs.iter().map(|p| (p.0 as f64, p.2 as f64)).collect();
        let la = format!("peer {}", self.a.peer_id);
        let lb = format!("peer {}", self.b.peer_id);
        line_chart(&self.title(), &[(&la, &a), (&lb, &b)])
    }
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m:.1} {top:.1} V{bottom:.1} H{right:.1}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        top = MARGIN / 2.0,
        bottom = HEIGHT - MARGIN,
        right = WIDTH - MARGIN / 2.0
    );
    s
}

fn line_chart(title: &str, lines: &[(&str, &[(f64, f64)])]) -> String {
    let all = lines.iter().flat_map(|(_, pts)| pts.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, 0.0f64, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let plot_w = WIDTH - MARGIN * 1.5;
    let plot_h = HEIGHT - MARGIN * 1.5;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * plot_h;

    let mut s = svg_open(title);
    for (label, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"#,
            HEIGHT - MARGIN + 16.0
        );
    }
    for (label, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{y:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{label}</text>"#,
            MARGIN - 4.0
        );
    }
    for (i, (name, pts)) in lines.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let mut d = String::new();
        for &(x, y) in pts.iter() {
            let _ = write!(d, "{:.2},{:.2} ", sx(x), sy(y));
        }
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{colour}" fill="none"/>"#, d.trim_end());
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="{colour}">{}</text>"#,
            WIDTH - MARGIN * 2.0,
            MARGIN / 2.0 + 14.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bar_chart(title: &str, bars: &[(String, u64)]) -> String {
    let max = bars.iter().map(|b| b.1).max().unwrap_or(0).max(1) as f64;
    let plot_w = WIDTH - MARGIN * 1.5;
    let plot_h = HEIGHT - MARGIN * 1.5;
    let slot = plot_w / bars.len().max(1) as f64;
    let mut s = svg_open(title);
    for (i, (label, n)) in bars.iter().enumerate() {
        let h = *n as f64 / max * plot_h;
        let x = MARGIN + slot * i as f64 + slot * 0.1;
        let y = HEIGHT - MARGIN - h;
        let colour = COLOURS[i % 2];
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{colour}"><title>{} {n}</title></rect>"#,
            slot * 0.8,
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.2},{:.1}) rotate(60)" font-family="sans-serif" font-size="9">{}</text>"#,
            x + slot * 0.4,
            HEIGHT - MARGIN + 6.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
