//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MSEGCKPT" | version u32
//! network config | domains_completed u32
//! entry count u32, then per entry: id (u32 len + utf-8), dtype u8, rank u8,
//!     dims u32 each, raw f64 data
//! sections, each: tag (u32 len + ascii) then payload; terminated by tag "END"
//!     IMPORTANCE  granularity u8, normalized u8, sample_count u64,
//!                 task_count u64, then per entry: id, len u32, f64 data
//!     FREEZE      per entry: id, len u32, bit-packed flags (LSB first)
//!     OPTSTATE    step u64, then per entry: id, len u32, f64 velocity
//!     PROGRESS    rows u32, cols u32, f64 data of the finished R rows
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::importance::{Granularity, ImportanceMap};
use crate::network::{SegNet, SegNetConfig};
use crate::regularization::FreezeMask;
use crate::tensor::Tensor;
use crate::trainer::OptimizerState;

const MAGIC: &[u8; 8] = b"MSEGCKPT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const MAX_ENTRIES: usize = 1 << 16;
const MAX_LEN: usize = 1 << 28;

/// Everything needed to continue a sequence after some domains.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: SegNet,
    pub domains_completed: usize,
    pub importance: Option<ImportanceMap>,
    pub freeze: Option<FreezeMask>,
    pub optimizer: Option<OptimizerState>,
    /// Rows of the train-test matrix finished so far.
    pub progress: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(network: SegNet) -> Self {
        Self {
            network,
            domains_completed: 0,
            importance: None,
            freeze: None,
            optimizer: None,
            progress: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        self.write_to(file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let store = self.network.params();
        if let Some(m) = &self.importance {
            m.check_aligned(store)?;
        }
        if let Some(f) = &self.freeze {
            f.check_aligned(store)?;
        }
        if let Some(o) = &self.optimizer {
            o.check_aligned(store)?;
        }

        let mut w = Writer::new(out);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        write_config(&mut w, self.network.config())?;
        w.len(self.domains_completed)?;

        w.len(store.len())?;
        for e in store.entries() {
            w.str(&e.id)?;
            w.u8(DTYPE_F64)?;
            let shape = e.tensor.shape();
            w.u8(shape.len() as u8)?;
            for &d in shape {
                w.len(d)?;
            }
            w.f64s(e.tensor.data())?;
        }

        if let Some(m) = &self.importance {
            w.str("IMPORTANCE")?;
            w.u8(m.granularity().tag())?;
            w.u8(m.is_normalized() as u8)?;
            w.u64(m.sample_count() as u64)?;
            w.u64(m.task_count() as u64)?;
            for e in m.entries() {
                w.str(&e.id)?;
                w.len(e.values.len())?;
                w.f64s(&e.values)?;
            }
        }
        if let Some(f) = &self.freeze {
            w.str("FREEZE")?;
            for (id, flags) in f.entries() {
                w.str(id)?;
                w.len(flags.len())?;
                w.bytes(&pack_bits(flags))?;
            }
        }
        if let Some(o) = &self.optimizer {
            w.str("OPTSTATE")?;
            w.u64(o.step)?;
            for (id, v) in &o.velocity {
                w.str(id)?;
                w.len(v.len())?;
                w.f64s(v)?;
            }
        }
        if !self.progress.is_empty() {
            w.str("PROGRESS")?;
            let cols = self.progress[0].len();
            if self.progress.iter().any(|r| r.len() != cols) {
                return Err(Error::Format("progress rows differ in length".into()));
            }
            w.len(self.progress.len())?;
            w.len(cols)?;
            for row in &self.progress {
                w.f64s(row)?;
            }
        }
        w.str("END")?;
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        if r.bytes(MAGIC.len())? != MAGIC {
            return Err(Error::Format(
                "not a checkpoint file (bad magic bytes)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let config = read_config(&mut r)?;
        let domains_completed = r.len(MAX_ENTRIES)?;

        let n = r.len(MAX_ENTRIES)?;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.str()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!(
                    "{id}: unsupported dtype tag {dtype}"
                )));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.len(MAX_LEN))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel > MAX_LEN {
                return Err(Error::Format(format!("{id}: tensor too large")));
            }
            let data = r.f64s(numel)?;
            records.push((id, Tensor::new(shape, data)?));
        }
        let mut network = SegNet::build(config, 0)?;
        load_records(&mut network, records)?;

        let mut ckpt = Checkpoint {
            domains_completed,
            ..Checkpoint::new(network)
        };
        loop {
            let tag = r.str()?;
            match tag.as_str() {
                "END" => break,
                "IMPORTANCE" => ckpt.importance = Some(read_importance(&mut r, &ckpt.network)?),
                "FREEZE" => ckpt.freeze = Some(read_freeze(&mut r, &ckpt.network)?),
                "OPTSTATE" => ckpt.optimizer = Some(read_optimizer(&mut r, &ckpt.network)?),
                "PROGRESS" => {
                    let rows = r.len(MAX_ENTRIES)?;
                    let cols = r.len(MAX_ENTRIES)?;
                    ckpt.progress = (0..rows).map(|_| r.f64s(cols)).collect::<Result<_>>()?;
                }
                other => return Err(Error::Format(format!("unknown section {other:?}"))),
            }
        }
        r.expect_end()?;
        Ok(ckpt)
    }

    /// Copies the stored parameters into an existing network, which must
    /// have exactly the same parameter ids and shapes.
    pub fn load_into(&self, net: &mut SegNet) -> Result<()> {
        let records = self
            .network
            .params()
            .entries()
            .iter()
            .map(|e| (e.id.clone(), e.tensor.clone()))
            .collect();
        load_records(net, records)
    }
}

fn load_records(net: &mut SegNet, records: Vec<(String, Tensor)>) -> Result<()> {
    let described: Vec<(String, Vec<usize>)> = records
        .iter()
        .map(|(id, t)| (id.clone(), t.shape().to_vec()))
        .collect();
    net.params().check_compatible(&described)?;
    for (entry, (_, tensor)) in net.params_mut().entries_mut().iter_mut().zip(records) {
        entry.tensor = tensor;
    }
    Ok(())
}

fn write_config<W: Write>(w: &mut Writer<W>, c: &SegNetConfig) -> Result<()> {
    w.len(c.in_channels)?;
    w.len(c.num_classes)?;
    w.len(c.encoder_channels.len())?;
    for &ch in &c.encoder_channels {
        w.len(ch)?;
    }
    w.len(c.bottleneck_channels)?;
    w.f64(c.dropout_rate)
}

fn read_config<R: Read>(r: &mut Reader<R>) -> Result<SegNetConfig> {
    let in_channels = r.len(MAX_ENTRIES)?;
    let num_classes = r.len(MAX_ENTRIES)?;
    let stages = r.len(32)?;
    let encoder_channels = (0..stages)
        .map(|_| r.len(MAX_ENTRIES))
        .collect::<Result<_>>()?;
    let config = SegNetConfig {
        in_channels,
        num_classes,
        encoder_channels,
        bottleneck_channels: r.len(MAX_ENTRIES)?,
        dropout_rate: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("stored network config is invalid: {e}")))?;
    Ok(config)
}

/// Reads `id, len` and checks both against the network entry at `index`.
fn read_entry_header<R: Read>(
    r: &mut Reader<R>,
    net: &SegNet,
    index: usize,
    section: &str,
) -> Result<usize> {
    let id = r.str()?;
    let len = r.len(MAX_LEN)?;
    let entry = &net.params().entries()[index];
    if id != entry.id || len != entry.tensor.len() {
        return Err(Error::Format(format!(
            "{section}: entry {id} does not match parameter {}",
            entry.id
        )));
    }
    Ok(len)
}

fn read_importance<R: Read>(r: &mut Reader<R>, net: &SegNet) -> Result<ImportanceMap> {
    let tag = r.u8()?;
    let granularity = Granularity::from_tag(tag)
        .ok_or_else(|| Error::Format(format!("unknown granularity tag {tag}")))?;
    let normalized = r.u8()? != 0;
    let sample_count = r.u64()? as usize;
    let task_count = r.u64()? as usize;
    let mut values = Vec::with_capacity(net.params().len());
    for i in 0..net.params().len() {
        let len = read_entry_header(r, net, i, "IMPORTANCE")?;
        values.push(r.f64s(len)?);
    }
    ImportanceMap::from_values(
        net.params(),
        values,
        granularity,
        normalized,
        sample_count,
        task_count,
    )
}

fn read_freeze<R: Read>(r: &mut Reader<R>, net: &SegNet) -> Result<FreezeMask> {
    let mut entries = Vec::with_capacity(net.params().len());
    for i in 0..net.params().len() {
        let len = read_entry_header(r, net, i, "FREEZE")?;
        let packed = r.bytes(len.div_ceil(8))?;
        entries.push((
            net.params().entries()[i].id.clone(),
            unpack_bits(&packed, len),
        ));
    }
    Ok(FreezeMask::from_entries(entries))
}

fn read_optimizer<R: Read>(r: &mut Reader<R>, net: &SegNet) -> Result<OptimizerState> {
    let step = r.u64()?;
    let mut velocity = Vec::with_capacity(net.params().len());
    for i in 0..net.params().len() {
        let len = read_entry_header(r, net, i, "OPTSTATE")?;
        velocity.push((net.params().entries()[i].id.clone(), r.f64s(len)?));
    }
    Ok(OptimizerState { velocity, step })
}

fn pack_bits(flags: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; flags.len().div_ceil(8)];
    for (i, &f) in flags.iter().enumerate() {
        if f {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(packed: &[u8], len: usize) -> Vec<bool> {
    (0..len)
        .map(|i| packed[i / 8] & (1 << (i % 8)) != 0)
        .collect()
}
