//! Boykov–Kolmogorov max-flow on a graph with terminal capacities stored
//! per node, search trees reused between augmentations.

use std::collections::VecDeque;

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;
const TERMINAL: usize = usize::MAX - 1;
const ORPHAN: usize = usize::MAX - 2;

#[derive(Debug, Clone)]
struct Node {
    first: usize,
    parent: usize,
    in_sink_tree: bool,
    active: bool,
    ts: u64,
    dist: u64,
    /// Residual terminal capacity: positive towards the source, negative
    /// towards the sink.
    tr_cap: f64,
}

#[derive(Debug, Clone)]
struct Arc {
    head: usize,
    next: usize,
    r_cap: f64,
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    arcs: Vec<Arc>,
    flow: f64,
    active: VecDeque<usize>,
    orphans: VecDeque<usize>,
    time: u64,
}

#[inline]
fn sister(a: usize) -> usize {
    a ^ 1
}

fn check_capacity(c: f64) -> Result<()> {
    if c.is_nan() || c < 0.0 {
        return Err(Error::NegativeCapacity(c));
    }
    if !c.is_finite() {
        return Err(Error::InvalidInput("infinite capacity".into()));
    }
    Ok(())
}

impl Graph {
    pub fn new(n: usize) -> Self {
        let node = Node {
            first: NONE,
            parent: NONE,
            in_sink_tree: false,
            active: false,
            ts: 0,
            dist: 0,
            tr_cap: 0.0,
        };
        Self {
            nodes: vec![node; n],
            arcs: Vec::new(),
            flow: 0.0,
            active: VecDeque::new(),
            orphans: VecDeque::new(),
            time: 0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Adds source→i and i→sink capacities.
    pub fn add_tweights(&mut self, i: usize, cap_source: f64, cap_sink: f64) -> Result<()> {
        check_capacity(cap_source)?;
        check_capacity(cap_sink)?;
        let (mut cs, mut ct) = (cap_source, cap_sink);
        let delta = self.nodes[i].tr_cap;
        if delta > 0.0 {
            cs += delta;
        } else {
            ct -= delta;
        }
        self.flow += cs.min(ct);
        self.nodes[i].tr_cap = cs - ct;
        Ok(())
    }

    /// Adds an arc pair i→j (capacity `cap`) and j→i (capacity `rev_cap`).
    pub fn add_edge(&mut self, i: usize, j: usize, cap: f64, rev_cap: f64) -> Result<()> {
        check_capacity(cap)?;
        check_capacity(rev_cap)?;
        if i == j || i >= self.nodes.len() || j >= self.nodes.len() {
            return Err(Error::InvalidInput(format!("invalid edge {i}–{j}")));
        }
        let a = self.arcs.len();
        self.arcs.push(Arc { head: j, next: self.nodes[i].first, r_cap: cap });
        self.arcs.push(Arc { head: i, next: self.nodes[j].first, r_cap: rev_cap });
        self.nodes[i].first = a;
        self.nodes[j].first = a + 1;
        Ok(())
    }

    fn set_active(&mut self, i: usize) {
        if !self.nodes[i].active {
            self.nodes[i].active = true;
            self.active.push_back(i);
        }
    }

    fn next_active(&mut self) -> Option<usize> {
        while let Some(i) = self.active.pop_front() {
            self.nodes[i].active = false;
            if self.nodes[i].parent != NONE {
                return Some(i);
            }
        }
        None
    }

    fn arcs_of(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut a = self.nodes[i].first;
        while a != NONE {
            out.push(a);
            a = self.arcs[a].next;
        }
        out
    }

    /// Runs to completion and returns the max-flow value.
    pub fn maxflow(&mut self) -> f64 {
        self.active.clear();
        self.orphans.clear();
        self.time = 0;
        for i in 0..self.nodes.len() {
            let n = &mut self.nodes[i];
            n.active = false;
            n.ts = 0;
            if n.tr_cap != 0.0 {
                n.in_sink_tree = n.tr_cap < 0.0;
                n.parent = TERMINAL;
                n.dist = 1;
                self.set_active(i);
            } else {
                n.parent = NONE;
            }
        }
        while let Some(i) = self.next_active() {
            let meeting = self.grow(i);
            self.time += 1;
            if let Some(a) = meeting {
                self.augment(a);
                while let Some(o) = self.orphans.pop_front() {
                    if self.nodes[o].in_sink_tree {
                        self.adopt_sink(o);
                    } else {
                        self.adopt_source(o);
                    }
                }
                if self.nodes[i].parent != NONE && !self.nodes[i].active {
                    self.nodes[i].active = true;
                    self.active.push_front(i);
                }
            }
        }
        self.flow
    }

    /// Expands the tree containing `i`; returns an arc from the source tree
    /// to the sink tree if the trees touch.
    fn grow(&mut self, i: usize) -> Option<usize> {
        let sink = self.nodes[i].in_sink_tree;
        for a in self.arcs_of(i) {
            let cap = if sink { self.arcs[sister(a)].r_cap } else { self.arcs[a].r_cap };
            if cap <= 0.0 {
                continue;
            }
            let j = self.arcs[a].head;
            if self.nodes[j].parent == NONE {
                let (ts, dist) = (self.nodes[i].ts, self.nodes[i].dist);
                let nj = &mut self.nodes[j];
                nj.in_sink_tree = sink;
                nj.parent = sister(a);
                nj.ts = ts;
                nj.dist = dist + 1;
                self.set_active(j);
            } else if self.nodes[j].in_sink_tree != sink {
                return Some(if sink { sister(a) } else { a });
            } else if self.nodes[j].ts <= self.nodes[i].ts && self.nodes[j].dist > self.nodes[i].dist {
                let (ts, dist) = (self.nodes[i].ts, self.nodes[i].dist);
                let nj = &mut self.nodes[j];
                nj.parent = sister(a);
                nj.ts = ts;
                nj.dist = dist + 1;
            }
        }
        None
    }

    fn orphan_front(&mut self, i: usize) {
        self.nodes[i].parent = ORPHAN;
        self.orphans.push_front(i);
    }

    fn orphan_rear(&mut self, i: usize) {
        self.nodes[i].parent = ORPHAN;
        self.orphans.push_back(i);
    }

    fn augment(&mut self, middle: usize) {
        let tail = self.arcs[sister(middle)].head;
        let head = self.arcs[middle].head;
        let mut b = self.arcs[middle].r_cap;
        let mut i = tail;
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            b = b.min(self.arcs[sister(a)].r_cap);
            i = self.arcs[a].head;
        }
        b = b.min(self.nodes[i].tr_cap);
        i = head;
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            b = b.min(self.arcs[a].r_cap);
            i = self.arcs[a].head;
        }
        b = b.min(-self.nodes[i].tr_cap);

        self.arcs[sister(middle)].r_cap += b;
        self.arcs[middle].r_cap -= b;
        i = tail;
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            self.arcs[a].r_cap += b;
            self.arcs[sister(a)].r_cap -= b;
            if self.arcs[sister(a)].r_cap == 0.0 {
                self.orphan_front(i);
            }
            i = self.arcs[a].head;
        }
        self.nodes[i].tr_cap -= b;
        if self.nodes[i].tr_cap == 0.0 {
            self.orphan_front(i);
        }
        i = head;
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            self.arcs[sister(a)].r_cap += b;
            self.arcs[a].r_cap -= b;
            if self.arcs[a].r_cap == 0.0 {
                self.orphan_front(i);
            }
            i = self.arcs[a].head;
        }
        self.nodes[i].tr_cap += b;
        if self.nodes[i].tr_cap == 0.0 {
            self.orphan_front(i);
        }
        self.flow += b;
    }

    /// Distance from `j` to its terminal through valid parents, or `None`
    /// if the path reaches an orphan. Marks the path with the current time.
    fn origin_distance(&mut self, start: usize) -> Option<u64> {
        let mut j = start;
        let mut d = 0u64;
        loop {
            if self.nodes[j].ts == self.time {
                d += self.nodes[j].dist;
                break;
            }
            let a = self.nodes[j].parent;
            d += 1;
            if a == TERMINAL {
                self.nodes[j].ts = self.time;
                self.nodes[j].dist = 1;
                break;
            }
            if a == ORPHAN {
                return None;
            }
            j = self.arcs[a].head;
        }
        let mut dd = d;
        let mut j = start;
        while self.nodes[j].ts != self.time {
            self.nodes[j].ts = self.time;
            self.nodes[j].dist = dd;
            dd -= 1;
            j = self.arcs[self.nodes[j].parent].head;
        }
        Some(d)
    }

    fn adopt(&mut self, i: usize, sink: bool) {
        let mut best: Option<(usize, u64)> = None;
        let arcs = self.arcs_of(i);
        for &a in &arcs {
            let cap = if sink { self.arcs[a].r_cap } else { self.arcs[sister(a)].r_cap };
            if cap <= 0.0 {
                continue;
            }
            let j = self.arcs[a].head;
            if self.nodes[j].in_sink_tree != sink || self.nodes[j].parent == NONE {
                continue;
            }
            if let Some(d) = self.origin_distance(j) {
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((a, d));
                }
            }
        }
        if let Some((a, d)) = best {
            let n = &mut self.nodes[i];
            n.parent = a;
            n.ts = self.time;
            n.dist = d + 1;
            return;
        }
        self.nodes[i].parent = NONE;
        for &a in &arcs {
            let j = self.arcs[a].head;
            let pj = self.nodes[j].parent;
            if self.nodes[j].in_sink_tree != sink || pj == NONE {
                continue;
            }
            let cap = if sink { self.arcs[a].r_cap } else { self.arcs[sister(a)].r_cap };
            if cap > 0.0 {
                self.set_active(j);
            }
            if pj != TERMINAL && pj != ORPHAN && self.arcs[pj].head == i {
                self.orphan_rear(j);
            }
        }
    }

    fn adopt_source(&mut self, i: usize) {
        self.adopt(i, false);
    }

    fn adopt_sink(&mut self, i: usize) {
        self.adopt(i, true);
    }

    /// Nodes that reach the sink in the residual graph after `maxflow`:
    /// the sink side of the minimum cut with the largest source side.
    pub fn sink_side(&self) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.tr_cap < 0.0 {
                seen[i] = true;
                queue.push_back(i);
            }
        }
        while let Some(i) = queue.pop_front() {
            let mut a = self.nodes[i].first;
            while a != NONE {
                let j = self.arcs[a].head;
                if !seen[j] && self.arcs[sister(a)].r_cap > 0.0 {
                    seen[j] = true;
                    queue.push_back(j);
                }
                a = self.arcs[a].next;
            }
        }
        seen
    }

    /// Nodes reachable from the source in the residual graph after
    /// `maxflow`: the source side of a minimum cut.
    pub fn source_side(&self) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.tr_cap > 0.0 {
                seen[i] = true;
                queue.push_back(i);
            }
        }
        while let Some(i) = queue.pop_front() {
            let mut a = self.nodes[i].first;
            while a != NONE {
                let j = self.arcs[a].head;
                if !seen[j] && self.arcs[a].r_cap > 0.0 {
                    seen[j] = true;
                    queue.push_back(j);
                }
                a = self.arcs[a].next;
            }
        }
        seen
    }
}
