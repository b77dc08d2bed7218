use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackendError, CacheKey, CompletionBackend, CompletionRequest, RetryPolicy, Sleeper, ThreadSleeper};

/// Cached, retrying completion client over any transport.
///
/// Safe to share across worker threads. Concurrent misses on the same key may
/// both reach the transport; the cache keeps whichever lands last, which is
/// harmless because the stored text is the raw completion for that key.
pub struct LlmClient {
    transport: Arc<dyn CompletionBackend>,
    cache: RwLock<HashMap<CacheKey, String>>,
    retry: RetryPolicy,
    sleeper: Arc<dyn Sleeper>,
    jitter: Mutex<ChaCha8Rng>,
    in_flight: Option<Limiter>,
    transport_calls: AtomicUsize,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn CompletionBackend>) -> Self {
        Self {
            transport,
            cache: RwLock::new(HashMap::new()),
            retry: RetryPolicy::default(),
            sleeper: Arc::new(ThreadSleeper),
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(0)),
            in_flight: None,
            transport_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Result<Self, BackendError> {
        retry.validate()?;
        self.retry = retry;
        Ok(self)
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_jitter_seed(self, seed: u64) -> Self {
        *self.jitter.lock().unwrap() = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// Caps concurrent transport calls. Cache hits are never throttled.
    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = Some(Limiter::new(limit.max(1)));
        self
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    /// Number of times the transport has been invoked, retries included.
    pub fn transport_calls(&self) -> usize {
        self.transport_calls.load(Ordering::SeqCst)
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        if req.prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let key = CacheKey::of(req);
        if let Some(hit) = self.cache.read().unwrap().get(&key) {
            return Ok(hit.clone());
        }

        let _permit = self.in_flight.as_ref().map(Limiter::acquire);
        let mut attempt = 1;
        loop {
            self.transport_calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.complete(req) {
                Ok(text) => {
                    self.cache.write().unwrap().insert(key, text.clone());
                    return Ok(text);
                }
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.jittered_delay(attempt, self.jitter_unit());
                    log::warn!("{} attempt {attempt} failed ({e}); retrying in {delay:?}", req.kind);
                    self.sleeper.sleep(delay);
                    attempt += 1;
                }
                Err(e) if e.is_transient() => {
                    return Err(BackendError::RetriesExhausted {
                        attempts: attempt,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn jitter_unit(&self) -> f64 {
        if self.retry.jitter_fraction == 0.0 {
            return 0.0;
        }
        let bits = self.jitter.lock().unwrap().next_u64() >> 11;
        (bits as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}
