//! Prompting sessions: encode each B-scan once, answer many prompts
//! against the cached embedding.

use std::collections::{BTreeMap, HashMap};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{rle_encode_binary, RleMask, Volume};
use crate::error::{Error, Result};
use crate::lora::LoraState;
use crate::model::{EmbeddingProvenance, ImageEmbedding, PromptBox, PromptPoint, PromptSet, SegmentationModel};

pub const DEFAULT_CACHE_CAPACITY: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub volume_id: String,
    pub slice_index: usize,
    pub model_version: String,
}

/// Least-recently-used store of image embeddings.
#[derive(Debug)]
pub struct EmbeddingCache {
    capacity: usize,
    entries: IndexMap<CacheKey, ImageEmbedding>,
}

impl EmbeddingCache {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("cache capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            entries: IndexMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.entries.contains_key(key)
    }

    /// Returns the stored embedding (marking it most recently used) or
    /// computes and stores it. The flag reports whether it was a hit.
    pub fn get_or_compute(
        &mut self,
        key: CacheKey,
        compute: impl FnOnce() -> Result<ImageEmbedding>,
    ) -> Result<(ImageEmbedding, bool)> {
        if let Some(index) = self.entries.get_index_of(&key) {
            let last = self.entries.len() - 1;
            self.entries.move_index(index, last);
            return Ok((self.entries[last].clone(), true));
        }
        let embedding = compute()?;
        self.entries.insert(key, embedding.clone());
        while self.entries.len() > self.capacity {
            self.entries.shift_remove_index(0);
        }
        Ok((embedding, false))
    }
}

/// Hash of the weights and adapters that identifies cached embeddings.
pub fn model_version(model: &SegmentationModel, lora: Option<&LoraState>) -> Result<String> {
    let mut h = DefaultHasher::new();
    model.weights.fingerprint()?.hash(&mut h);
    if let Some(state) = lora {
        state.factors.fingerprint()?.hash(&mut h);
        state.alpha.to_bits().hash(&mut h);
    }
    Ok(format!("{:016x}", h.finish()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub slice_index: usize,
    pub class_id: u8,
    #[serde(default)]
    pub points: Vec<PromptPoint>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<PromptBox>,
}

impl PromptRequest {
    pub fn prompt_set(&self) -> PromptSet {
        PromptSet {
            points: self.points.clone(),
            bbox: self.bbox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitStats {
    pub min: f32,
    pub max: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResponse {
    pub session_id: String,
    pub slice_index: usize,
    pub class_id: u8,
    /// Binary mask of `class_id` at input resolution.
    pub mask: RleMask,
    pub logit_stats: LogitStats,
    /// Sparse prompt tokens consumed by the decoder.
    pub num_prompt_tokens: usize,
    pub latency_ms: f64,
    pub cache_hit: bool,
}

/// One volume opened against one model.
#[derive(Debug)]
pub struct Session {
    pub session_id: String,
    pub volume: Volume,
    pub checkpoint: String,
    model: Arc<SegmentationModel>,
    lora: Option<Arc<LoraState>>,
    model_version: String,
    cache: EmbeddingCache,
    history: BTreeMap<usize, Vec<PromptRequest>>,
}

impl Session {
    pub fn new(
        session_id: impl Into<String>,
        volume: Volume,
        checkpoint: impl Into<String>,
        model: Arc<SegmentationModel>,
        lora: Option<Arc<LoraState>>,
        cache_capacity: usize,
    ) -> Result<Self> {
        let size = model.config.input_size;
        if volume.shape.height != size || volume.shape.width != size {
            return Err(Error::Validation(format!(
                "B-scans are {}x{}, the model expects {size}x{size}",
                volume.shape.height, volume.shape.width
            )));
        }
        let model_version = model_version(&model, lora.as_deref())?;
        Ok(Self {
            session_id: session_id.into(),
            volume,
            checkpoint: checkpoint.into(),
            model,
            lora,
            model_version,
            cache: EmbeddingCache::new(cache_capacity)?,
            history: BTreeMap::new(),
        })
    }

    pub fn model(&self) -> &SegmentationModel {
        &self.model
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    /// Requests received for `slice_index`, oldest first.
    pub fn history(&self, slice_index: usize) -> &[PromptRequest] {
        self.history.get(&slice_index).map_or(&[], Vec::as_slice)
    }

    pub fn get_or_compute_embedding(&mut self, slice_index: usize) -> Result<(ImageEmbedding, bool)> {
        if slice_index >= self.volume.shape.depth {
            return Err(Error::Validation(format!(
                "slice {slice_index} out of range for depth {}",
                self.volume.shape.depth
            )));
        }
        let key = CacheKey {
            volume_id: self.volume.volume_id.clone(),
            slice_index,
            model_version: self.model_version.clone(),
        };
        let (model, lora, volume) = (&self.model, self.lora.as_deref(), &self.volume);
        let provenance = EmbeddingProvenance {
            volume_id: key.volume_id.clone(),
            slice_index,
            model_version: key.model_version.clone(),
        };
        self.cache.get_or_compute(key, || {
            let mut e = model.encode_image(volume.slice(slice_index)?, lora)?;
            e.provenance = Some(provenance);
            Ok(e)
        })
    }

    pub fn handle_prompt(&mut self, request: &PromptRequest) -> Result<PromptResponse> {
        let start = Instant::now();
        let num_classes = self.model.config.num_classes;
        if request.class_id == 0 || request.class_id as usize > num_classes {
            return Err(Error::Validation(format!(
                "class_id {} must lie in 1..={num_classes}",
                request.class_id
            )));
        }
        let prompts = request.prompt_set();
        prompts.validate(self.model.config.input_size)?;
        let (embedding, cache_hit) = self.get_or_compute_embedding(request.slice_index)?;
        let prompt = self.model.encode_prompts(&prompts)?;
        let logits = self.model.decode_masks(&embedding, &prompt)?;
        let size = self.model.config.input_size;
        let mask = logits.class_mask(size, request.class_id)?;
        let (min, max) = logits.min_max()?;
        self.history
            .entry(request.slice_index)
            .or_default()
            .push(request.clone());
        Ok(PromptResponse {
            session_id: self.session_id.clone(),
            slice_index: request.slice_index,
            class_id: request.class_id,
            mask: rle_encode_binary(&mask, size, size)?,
            logit_stats: LogitStats { min, max },
            num_prompt_tokens: prompt.num_tokens(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            cache_hit,
        })
    }

    /// 8-bit grayscale pixels of one B-scan.
    pub fn slice_u8(&self, slice_index: usize) -> Result<Vec<u8>> {
        Ok(self
            .volume
            .slice(slice_index)?
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect())
    }
}

/// Open sessions keyed by id.
#[derive(Debug)]
pub struct SessionStore {
    cache_capacity: usize,
    next_id: u64,
    sessions: HashMap<String, Session>,
}

impl SessionStore {
    pub fn new(cache_capacity: usize) -> Result<Self> {
        EmbeddingCache::new(cache_capacity)?;
        Ok(Self {
            cache_capacity,
            next_id: 1,
            sessions: HashMap::new(),
        })
    }

    pub fn open(
        &mut self,
        volume: Volume,
        checkpoint: impl Into<String>,
        model: Arc<SegmentationModel>,
        lora: Option<Arc<LoraState>>,
    ) -> Result<String> {
        let id = format!("s{:06}", self.next_id);
        let session = Session::new(id.clone(), volume, checkpoint, model, lora, self.cache_capacity)?;
        self.next_id += 1;
        self.sessions.insert(id.clone(), session);
        Ok(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Session> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| Error::NotFound(format!("session `{id}`")))
    }

    pub fn get(&self, id: &str) -> Result<&Session> {
        self.sessions
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("session `{id}`")))
    }

    pub fn close(&mut self, id: &str) -> Result<()> {
        self.sessions
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| Error::NotFound(format!("session `{id}`")))
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}
