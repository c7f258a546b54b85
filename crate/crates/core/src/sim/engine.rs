use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Role, SimConfig, SimError, SimEvent, SimResult, ENDGAME_FRACTION, MAX_REQUEST_WINDOW};
use crate::logs::{Eta, MessageKind, Percent, StatusRecord};

#[derive(Clone, Copy)]
struct Block {
    piece: u32,
    offset: u32,
    len: u32,
}

struct Geometry {
    blocks: Vec<Block>,
    piece_first: Vec<u32>,
    piece_len: Vec<u32>,
}

impl Geometry {
    fn new(cfg: &SimConfig) -> Self {
        let mut blocks = Vec::new();
        let mut piece_first = Vec::new();
        let mut piece_len = Vec::new();
        let mut remaining = cfg.file_size;
        let mut piece = 0u32;
        while remaining > 0 {
            let this_piece = remaining.min(u64::from(cfg.piece_size)) as u32;
            piece_first.push(blocks.len() as u32);
            let mut offset = 0u32;
            while offset < this_piece {
                let len = (this_piece - offset).min(cfg.block_size);
                blocks.push(Block { piece, offset, len });
                offset += len;
            }
            piece_len.push(blocks.len() as u32 - piece_first[piece as usize]);
            remaining -= u64::from(this_piece);
            piece += 1;
        }
        Geometry { blocks, piece_first, piece_len }
    }

    fn piece_blocks(&self, piece: u32) -> std::ops::Range<u32> {
        let first = self.piece_first[piece as usize];
        first..first + self.piece_len[piece as usize]
    }
}

/// Directed link: `up` serves blocks that `down` requested.
#[derive(Clone)]
struct Link {
    connected: bool,
    choked: bool,
    interested: bool,
    /// Pieces `up` holds that `down` lacks.
    interesting: u32,
    window: u32,
    queue: VecDeque<u32>,
    total: u64,
    snap_by_up: u64,
    snap_by_down: u64,
    queued_at_start: u32,
    delivered: u32,
}

impl Default for Link {
    fn default() -> Self {
        Link {
            connected: false,
            choked: true,
            interested: false,
            interesting: 0,
            window: 1,
            queue: VecDeque::new(),
            total: 0,
            snap_by_up: 0,
            snap_by_down: 0,
            queued_at_start: 0,
            delivered: 0,
        }
    }
}

struct Peer {
    active: bool,
    joined: bool,
    have: Vec<bool>,
    have_count: u32,
    received: Vec<bool>,
    pending: Vec<u8>,
    received_blocks: u64,
    piece_blocks_done: Vec<u32>,
    started: Vec<bool>,
    partial: BTreeSet<u32>,
    downloaded: u64,
    uploaded: u64,
    tick_down: u64,
    tick_up: u64,
    completed_at: Option<u32>,
}

struct Swarm<'a> {
    cfg: &'a SimConfig,
    geo: Geometry,
    n: usize,
    num_pieces: u32,
    peers: Vec<Peer>,
    links: Vec<Link>,
    avail: Vec<u32>,
    rng: ChaCha8Rng,
    events: Vec<SimEvent>,
    status: Vec<Vec<StatusRecord>>,
}

/// Runs the swarm until every leecher holds the file (or has left).
pub fn simulate(cfg: &SimConfig) -> Result<SimResult, SimError> {
    cfg.validate()?;
    let mut swarm = Swarm::new(cfg);
    let mut tick = 0u32;
    loop {
        swarm.step(tick);
        if swarm.finished() {
            break;
        }
        tick += 1;
        if tick >= cfg.max_ticks {
            return Err(SimError::TickBoundExceeded(cfg.max_ticks));
        }
    }
    Ok(SimResult {
        completed_at: swarm.peers.iter().map(|p| p.completed_at).collect(),
        status: swarm.status,
        events: swarm.events,
        ticks: tick + 1,
    })
}

impl<'a> Swarm<'a> {
    fn new(cfg: &'a SimConfig) -> Self {
        let geo = Geometry::new(cfg);
        let num_pieces = geo.piece_first.len() as u32;
        let num_blocks = geo.blocks.len();
        let peers = cfg
            .peers
            .iter()
            .map(|p| {
                let seed = p.role == Role::Seeder;
                Peer {
                    active: false,
                    joined: false,
                    have: vec![seed; num_pieces as usize],
                    have_count: if seed { num_pieces } else { 0 },
                    received: vec![seed; num_blocks],
                    pending: vec![0; num_blocks],
                    received_blocks: if seed { num_blocks as u64 } else { 0 },
                    piece_blocks_done: if seed { geo.piece_len.clone() } else { vec![0; num_pieces as usize] },
                    started: vec![seed; num_pieces as usize],
                    partial: BTreeSet::new(),
                    downloaded: 0,
                    uploaded: 0,
                    tick_down: 0,
                    tick_up: 0,
                    completed_at: None,
                }
            })
            .collect();
        let n = cfg.peers.len();
        Swarm {
            cfg,
            n,
            num_pieces,
            peers,
            links: vec![Link::default(); n * n],
            avail: vec![0; num_pieces as usize],
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            events: Vec::new(),
            status: vec![Vec::new(); n],
            geo,
        }
    }

    fn link(&self, up: usize, down: usize) -> &Link {
        &self.links[up * self.n + down]
    }

    fn link_mut(&mut self, up: usize, down: usize) -> &mut Link {
        &mut self.links[up * self.n + down]
    }

    fn is_complete(&self, peer: usize) -> bool {
        self.peers[peer].have_count == self.num_pieces
    }

    fn emit(&mut self, tick: u32, from: usize, to: usize, kind: MessageKind) -> &mut SimEvent {
        self.events.push(SimEvent {
            tick,
            from,
            to,
            kind,
            piece_index: None,
            block_offset: None,
            block_length: None,
            bitfield: None,
        });
        self.events.last_mut().expect("just pushed")
    }

    fn emit_block(&mut self, tick: u32, from: usize, to: usize, kind: MessageKind, block: u32) {
        let b = self.geo.blocks[block as usize];
        let ev = self.emit(tick, from, to, kind);
        ev.piece_index = Some(b.piece);
        ev.block_offset = Some(b.offset);
        ev.block_length = Some(b.len);
    }

    fn finished(&self) -> bool {
        self.cfg.peers.iter().zip(&self.peers).all(|(spec, p)| {
            spec.role == Role::Seeder || p.completed_at.is_some() || (p.joined && !p.active)
        })
    }

    fn step(&mut self, tick: u32) {
        for p in &mut self.peers {
            p.tick_down = 0;
            p.tick_up = 0;
        }
        self.membership(tick);
        self.update_interest(tick);
        for peer in 0..self.n {
            if self.peers[peer].active {
                self.choke_round(tick, peer);
            }
        }
        self.issue_requests(tick);
        self.transfer(tick);
        self.snapshot(tick);
    }

    fn membership(&mut self, tick: u32) {
        for i in 0..self.n {
            if self.peers[i].active && self.cfg.peers[i].stop_tick == Some(tick) {
                self.depart(i);
            }
        }
        let mut joined_now = false;
        for i in 0..self.n {
            if !self.peers[i].joined && self.cfg.peers[i].start_tick == tick {
                self.peers[i].joined = true;
                self.peers[i].active = true;
                for p in 0..self.num_pieces as usize {
                    if self.peers[i].have[p] {
                        self.avail[p] += 1;
                    }
                }
                joined_now = true;
            }
        }
        if !joined_now {
            return;
        }
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.peers[i].active && self.peers[j].active && !self.link(i, j).connected {
                    self.connect(tick, i, j);
                }
            }
        }
    }

    fn connect(&mut self, tick: u32, i: usize, j: usize) {
        for (a, b) in [(i, j), (j, i)] {
            let interesting = (0..self.num_pieces as usize)
                .filter(|&p| self.peers[a].have[p] && !self.peers[b].have[p])
                .count() as u32;
            let link = self.link_mut(a, b);
            *link = Link { connected: true, interesting, ..Link::default() };
        }
        for (from, to) in [(i, j), (j, i)] {
            let bits = self.bitfield_bytes(from);
            self.emit(tick, from, to, MessageKind::Bitfield).bitfield = Some(bits);
        }
    }

    fn bitfield_bytes(&self, peer: usize) -> Vec<u8> {
        let have = &self.peers[peer].have;
        let mut out = vec![0u8; have.len().div_ceil(8)];
        for (p, &h) in have.iter().enumerate() {
            if h {
                out[p / 8] |= 0x80 >> (p % 8);
            }
        }
        out
    }

    fn depart(&mut self, i: usize) {
        self.peers[i].active = false;
        for p in 0..self.num_pieces as usize {
            if self.peers[i].have[p] {
                self.avail[p] -= 1;
            }
        }
        for j in 0..self.n {
            if j == i {
                continue;
            }
            self.drop_queue(i, j);
            self.drop_queue(j, i);
            *self.link_mut(i, j) = Link::default();
            *self.link_mut(j, i) = Link::default();
        }
    }

    /// Discards the requests `down` has outstanding on `up`.
    fn drop_queue(&mut self, up: usize, down: usize) {
        let queue = std::mem::take(&mut self.link_mut(up, down).queue);
        for block in queue {
            self.peers[down].pending[block as usize] -= 1;
        }
    }

    fn update_interest(&mut self, tick: u32) {
        for down in 0..self.n {
            if !self.peers[down].active {
                continue;
            }
            let complete = self.is_complete(down);
            for up in 0..self.n {
                if up == down || !self.link(up, down).connected {
                    continue;
                }
                let link = self.link(up, down);
                let want = !complete && link.interesting > 0;
                if want != link.interested {
                    self.link_mut(up, down).interested = want;
                    let kind = if want { MessageKind::Interested } else { MessageKind::NotInterested };
                    self.emit(tick, down, up, kind);
                }
            }
        }
    }

    /// Tit-for-tat score of `down` as seen by uploader `up`: bytes received
    /// from it since the last rechoke, or, once `up` is seeding, bytes sent
    /// to it.
    fn score(&self, up: usize, down: usize) -> u64 {
        if self.is_complete(up) {
            let l = self.link(up, down);
            l.total - l.snap_by_up
        } else {
            let l = self.link(down, up);
            l.total - l.snap_by_down
        }
    }

    fn ranked(&mut self, up: usize, candidates: Vec<usize>) -> Vec<usize> {
        let mut keyed: Vec<(u64, u64, usize)> = candidates
            .into_iter()
            .map(|d| (self.score(up, d), self.rng.next_u64(), d))
            .collect();
        keyed.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
        keyed.into_iter().map(|(_, _, d)| d).collect()
    }

    fn choke_round(&mut self, tick: u32, up: usize) {
        let start = self.cfg.peers[up].start_tick;
        let full = (tick - start).is_multiple_of(self.cfg.rechoke_period);
        let interested: Vec<usize> = (0..self.n)
            .filter(|&d| d != up && self.link(up, d).connected && self.link(up, d).interested)
            .collect();

        if full {
            let ranked = self.ranked(up, interested);
            let regular = ranked.len().min(self.cfg.upload_slots(up));
            let mut chosen: BTreeSet<usize> = ranked[..regular].iter().copied().collect();
            let mut rest: Vec<usize> = ranked[regular..].to_vec();
            rest.sort_unstable();
            for _ in 0..self.cfg.optimistic_slots {
                if rest.is_empty() {
                    break;
                }
                let pick = self.rng.random_range(0..rest.len());
                chosen.insert(rest.remove(pick));
            }
            for down in 0..self.n {
                if down == up || !self.link(up, down).connected {
                    continue;
                }
                let unchoked = !self.link(up, down).choked;
                let keep = chosen.contains(&down);
                if unchoked && !keep {
                    self.set_choke(tick, up, down, true);
                } else if !unchoked && keep {
                    self.set_choke(tick, up, down, false);
                }
            }
            for other in 0..self.n {
                if other != up {
                    let idx = up * self.n + other;
                    self.links[idx].snap_by_up = self.links[idx].total;
                    let idx = other * self.n + up;
                    self.links[idx].snap_by_down = self.links[idx].total;
                }
            }
        } else {
            let slots = self.cfg.upload_slots(up) + self.cfg.optimistic_slots;
            let used = interested.iter().filter(|&&d| !self.link(up, d).choked).count();
            if used >= slots {
                return;
            }
            let waiting: Vec<usize> =
                interested.into_iter().filter(|&d| self.link(up, d).choked).collect();
            if waiting.is_empty() {
                return;
            }
            let ranked = self.ranked(up, waiting);
            for down in ranked.into_iter().take(slots - used) {
                self.set_choke(tick, up, down, false);
            }
        }
    }

    fn set_choke(&mut self, tick: u32, up: usize, down: usize, choke: bool) {
        if choke {
            self.drop_queue(up, down);
            let link = self.link_mut(up, down);
            link.choked = true;
            link.window = 1;
            self.emit(tick, up, down, MessageKind::Choke);
        } else {
            let link = self.link_mut(up, down);
            link.choked = false;
            link.window = 1;
            self.emit(tick, up, down, MessageKind::Unchoke);
        }
    }

    fn issue_requests(&mut self, tick: u32) {
        for down in 0..self.n {
            if !self.peers[down].active || self.is_complete(down) {
                continue;
            }
            for up in 0..self.n {
                if up == down {
                    continue;
                }
                let link = self.link(up, down);
                if !link.connected || link.choked || !link.interested {
                    continue;
                }
                while (self.link(up, down).queue.len() as u32) < self.link(up, down).window {
                    let Some(block) = self.pick_block(down, up) else { break };
                    let piece = self.geo.blocks[block as usize].piece as usize;
                    let peer = &mut self.peers[down];
                    peer.pending[block as usize] += 1;
                    if !peer.started[piece] {
                        peer.started[piece] = true;
                        peer.partial.insert(piece as u32);
                    }
                    self.link_mut(up, down).queue.push_back(block);
                    self.emit_block(tick, down, up, MessageKind::Request, block);
                }
            }
        }
    }

    /// Next block `down` should request from `up`: unrequested blocks of
    /// started pieces first, then a new piece by rarest-first (ties to the
    /// lowest index), then endgame duplicates.
    fn pick_block(&self, down: usize, up: usize) -> Option<u32> {
        let d = &self.peers[down];
        let u = &self.peers[up];

        let fresh_block = |piece: u32| {
            self.geo
                .piece_blocks(piece)
                .find(|&b| !d.received[b as usize] && d.pending[b as usize] == 0)
        };

        let mut best: Option<(u32, u32, u32)> = None;
        for &piece in &d.partial {
            if !u.have[piece as usize] {
                continue;
            }
            if let Some(block) = fresh_block(piece) {
                let key = (self.avail[piece as usize], piece, block);
                if best.is_none_or(|b| (key.0, key.1) < (b.0, b.1)) {
                    best = Some(key);
                }
            }
        }
        if let Some((_, _, block)) = best {
            return Some(block);
        }

        let mut best_piece: Option<(u32, u32)> = None;
        for piece in 0..self.num_pieces {
            let p = piece as usize;
            if u.have[p] && !d.have[p] && !d.started[p] {
                let key = (self.avail[p], piece);
                if best_piece.is_none_or(|b| key < b) {
                    best_piece = Some(key);
                }
            }
        }
        if let Some((_, piece)) = best_piece {
            return fresh_block(piece);
        }

        let total = self.geo.blocks.len() as f64;
        let remaining = total - d.received_blocks as f64;
        if remaining >= ENDGAME_FRACTION * total {
            return None;
        }
        let queue = &self.link(up, down).queue;
        let mut best_dup: Option<(u8, u32)> = None;
        for &piece in &d.partial {
            if !u.have[piece as usize] {
                continue;
            }
            for block in self.geo.piece_blocks(piece) {
                let b = block as usize;
                if !d.received[b] && d.pending[b] > 0 && !queue.contains(&block) {
                    let key = (d.pending[b], block);
                    if best_dup.is_none_or(|x| key < x) {
                        best_dup = Some(key);
                    }
                }
            }
        }
        best_dup.map(|(_, block)| block)
    }

    fn transfer(&mut self, tick: u32) {
        let span = u64::from(self.cfg.tick);
        let mut up_left: Vec<u64> = self.cfg.peers.iter().map(|p| p.up_cap.saturating_mul(span)).collect();
        let mut down_left: Vec<u64> = self.cfg.peers.iter().map(|p| p.down_cap.saturating_mul(span)).collect();

        let mut active = Vec::new();
        for up in 0..self.n {
            for down in 0..self.n {
                let idx = up * self.n + down;
                let link = &mut self.links[idx];
                link.delivered = 0;
                link.queued_at_start = link.queue.len() as u32;
                if up != down && link.connected && !link.choked && !link.queue.is_empty() {
                    active.push((up, down));
                }
            }
        }
        if active.is_empty() {
            return;
        }
        let offset = tick as usize % active.len();
        active.rotate_left(offset);

        loop {
            let mut progressed = false;
            for &(up, down) in &active {
                let Some(&block) = self.link(up, down).queue.front() else { continue };
                let len = u64::from(self.geo.blocks[block as usize].len);
                if up_left[up] >= len && down_left[down] >= len {
                    up_left[up] -= len;
                    down_left[down] -= len;
                    self.deliver(tick, up, down, block);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }

        for (up, down) in active {
            let link = self.link_mut(up, down);
            if link.delivered == link.queued_at_start && link.queued_at_start >= link.window {
                link.window = (link.window * 2).min(MAX_REQUEST_WINDOW);
            }
        }
    }

    fn deliver(&mut self, tick: u32, up: usize, down: usize, block: u32) {
        let b = self.geo.blocks[block as usize];
        let len = u64::from(b.len);
        {
            let link = self.link_mut(up, down);
            link.queue.pop_front();
            link.total += len;
            link.delivered += 1;
        }
        self.peers[up].tick_up += len;
        self.peers[up].uploaded += len;
        {
            let d = &mut self.peers[down];
            d.tick_down += len;
            d.downloaded += len;
            d.pending[block as usize] -= 1;
            d.received[block as usize] = true;
            d.received_blocks += 1;
            d.piece_blocks_done[b.piece as usize] += 1;
        }
        self.emit_block(tick, up, down, MessageKind::Piece, block);

        if self.peers[down].pending[block as usize] > 0 {
            for other in 0..self.n {
                if other == up || other == down {
                    continue;
                }
                let link = self.link_mut(other, down);
                if let Some(pos) = link.queue.iter().position(|&k| k == block) {
                    link.queue.remove(pos);
                    self.peers[down].pending[block as usize] -= 1;
                    self.emit_block(tick, down, other, MessageKind::Cancel, block);
                }
            }
        }

        if self.peers[down].piece_blocks_done[b.piece as usize] == self.geo.piece_len[b.piece as usize] {
            self.complete_piece(tick, down, b.piece);
        }
    }

    fn complete_piece(&mut self, tick: u32, peer: usize, piece: u32) {
        let p = piece as usize;
        {
            let d = &mut self.peers[peer];
            d.have[p] = true;
            d.have_count += 1;
            d.partial.remove(&piece);
        }
        self.avail[p] += 1;
        for other in 0..self.n {
            if other == peer || !self.link(peer, other).connected {
                continue;
            }
            self.emit(tick, peer, other, MessageKind::Have).piece_index = Some(piece);
            if self.peers[other].have[p] {
                self.link_mut(other, peer).interesting -= 1;
            } else {
                self.link_mut(peer, other).interesting += 1;
            }
        }
        if self.is_complete(peer) {
            self.peers[peer].completed_at = Some(tick);
        }
    }

    fn snapshot(&mut self, tick: u32) {
        let span = u64::from(self.cfg.tick);
        for i in 0..self.n {
            if !self.peers[i].active {
                continue;
            }
            let spec = &self.cfg.peers[i];
            let p = &self.peers[i];
            let complete = p.have_count == self.num_pieces;
            let down_speed = p.tick_down / span;
            let (percent, eta) = match spec.role {
                Role::Seeder => (Percent::COMPLETE, Eta::Infinite),
                Role::Leecher if complete => (Percent::COMPLETE, Eta::Seconds(0)),
                Role::Leecher => {
                    let remaining = self.cfg.file_size - p.downloaded;
                    let eta = if down_speed == 0 {
                        Eta::Infinite
                    } else {
                        Eta::Seconds(remaining.div_ceil(down_speed))
                    };
                    (Percent::from_fraction(p.downloaded, self.cfg.file_size).min(Percent(9_999)), eta)
                }
            };
            let num_peers = (0..self.n).filter(|&j| j != i && self.link(i, j).connected).count() as u32;
            let record = StatusRecord {
                timestamp: self.cfg.timestamp(tick),
                down_speed,
                up_speed: p.tick_up / span,
                downloaded: p.downloaded,
                uploaded: p.uploaded,
                eta,
                num_peers,
                percent,
                transfer_size: self.cfg.file_size,
                file_name: self.cfg.file_name.clone(),
            };
            self.status[i].push(record);
        }
    }
}
