use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use wspace_core::encoders::Modality;
use wspace_core::latent::{style_mix, LayerSet, WCode};
use wspace_core::pipeline::{generate_from_modality, EditKind, EditSession, Models, PipelineConfig};
use wspace_core::toyfaces::Slot;
use wspace_core::util::tensor_hash;

use super::wire::*;
use super::{ApiError, ApiResult, AppState, JobStatus, SessionSlot};
use crate::inputs::{check_image, labels_from_gray, mask_from_gray, sketch_from_gray};
use crate::manifest::Recorder;

type Body<T> = std::result::Result<Json<T>, JsonRejection>;

fn body<T>(b: Body<T>) -> ApiResult<T> {
    b.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

/// Run CPU-bound work on the blocking pool.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

pub async fn health(State(st): State<Arc<AppState>>) -> Json<Health> {
    let ready = st.is_ready();
    Json(Health {
        status: if ready { "ok" } else { "loading" }.into(),
        models: st.model_infos().into_iter().map(|i| i.name).collect(),
    })
}

pub async fn models(State(st): State<Arc<AppState>>) -> ApiResult<Json<ModelsResponse>> {
    let m = st.models()?;
    let g = m.generator.as_deref();
    Ok(Json(ModelsResponse {
        models: st.model_infos(),
        strategies: st.registry.names().map(str::to_string).collect(),
        similarity: m.similarity.as_ref().map(|s| s.kind().to_string()),
        resolution: g.map(|g| g.resolution()),
        layers: g.map(|g| g.layers()),
        channels: g.map(|g| g.channels()),
        max_iterations: st.config.serve.max_iterations,
        max_images: st.config.serve.max_images,
    }))
}

pub async fn layers(State(st): State<Arc<AppState>>) -> ApiResult<Json<LayersResponse>> {
    let m = st.models()?;
    let table = m.layer_table()?;
    let threshold = st.config.guided.layer_threshold;
    let layers = table
        .0
        .iter()
        .map(|(&layer, flips)| LayerRow {
            layer,
            flips: flips.iter().map(|f| (f.slot.name().to_string(), f.flip_rate)).collect(),
            owns: table.slots_for(layer, threshold).into_iter().map(|s: Slot| s.name().to_string()).collect(),
        })
        .collect();
    Ok(Json(LayersResponse { threshold, layers }))
}

fn decode_image(m: &Models, png: &str) -> ApiResult<wspace_tensor::Tensor> {
    let img = png_to_image(png)?;
    check_image(&img, m.generator()?.resolution())?;
    Ok(img)
}

pub async fn invert(State(st): State<Arc<AppState>>, b: Body<InvertRequest>) -> ApiResult<Json<CodeResponse>> {
    let req = body(b)?;
    let m = st.models()?;
    blocking(move || {
        let img = decode_image(&m, &req.image)?;
        let w = m.inversion()?.invert(&img)?;
        Ok(Json(CodeResponse::new(&w, &m.generator()?.synthesize(&w)?)?))
    })
    .await
}

pub async fn generate(State(st): State<Arc<AppState>>, b: Body<GenerateRequest>) -> ApiResult<Json<GenerateResponse>> {
    let req = body(b)?;
    let m = st.models()?;
    let max = st.config.serve.max_images;
    if req.n == 0 || req.n > max {
        return Err(ApiError::bad_request(format!("n must lie in 1..={max}")));
    }
    if req.sketch.is_some() && req.label.is_some() {
        return Err(ApiError::bad_request("give at most one of sketch and label"));
    }
    let pcfg = st.pipeline(req.iterations)?;
    let strategy = st.registry.get(req.strategy.as_deref().unwrap_or("A"))?;
    blocking(move || {
        let mut rec = Recorder::start("serve generate", &st.config);
        rec.input("text", req.text.clone());
        let r = m.generator()?.resolution();
        let (name, out) = if let Some(s) = &req.sketch {
            let (v, h, w) = png_to_gray(s)?;
            let x = sketch_from_gray(&v, h, w, r)?;
            ("sketch", generate_from_modality(&x, Modality::Sketch, &req.text, req.n, req.seed, &m, &pcfg)?)
        } else if let Some(l) = &req.label {
            let (v, h, w) = png_to_gray(l)?;
            let x = labels_from_gray(&v, h, w, r)?;
            ("label", generate_from_modality(&x, Modality::Label, &req.text, req.n, req.seed, &m, &pcfg)?)
        } else {
            (strategy.name(), strategy.generate(&req.text, req.n, req.seed, &m, &pcfg)?)
        };
        let images = out.iter().map(|g| CodeResponse::new(&g.w, &g.image)).collect::<Result<Vec<_>, _>>()?;
        for (k, g) in out.iter().enumerate() {
            rec.output(format!("sample-{k:02}"), tensor_hash(&g.image));
        }
        rec.finish(&st.config.runs_dir())?;
        Ok(Json(GenerateResponse { strategy: name.into(), images }))
    })
    .await
}

/// The session named in the request, or a new one started from `image`.
fn resolve_session(st: &AppState, m: &Models, session: Option<&str>, image: Option<&str>) -> ApiResult<Arc<SessionSlot>> {
    match (session, image) {
        (Some(id), None) => st.session(id),
        (id, Some(png)) => {
            let img = decode_image(m, png)?;
            let id = id.map_or_else(|| uuid::Uuid::new_v4().simple().to_string(), str::to_string);
            st.create_session(EditSession::new(&id, &img)?)
        }
        (None, None) => Err(ApiError::bad_request("give an image or a session id")),
    }
}

async fn run_edit(
    st: Arc<AppState>,
    m: Arc<Models>,
    slot: Arc<SessionSlot>,
    kind: EditKind,
    text: String,
    pcfg: PipelineConfig,
    background: bool,
) -> ApiResult<Response> {
    let control = slot.begin()?;
    let id = slot.snapshot().id().to_string();
    let task_slot = slot.clone();
    let task = tokio::task::spawn_blocking(move || {
        let mut rec = Recorder::start("serve edit", &st.config);
        rec.input("text", text.clone());
        let mut s = task_slot.snapshot();
        rec.input("session", s.current_hash());
        let outcome = s
            .apply(kind, &text, &m, &st.registry, &pcfg, Some(&control))
            .map(|_| ())
            .and_then(|()| s.save(&st.session_dir(s.id())));
        if outcome.is_ok() {
            rec.output("image", s.current_hash());
            if let Err(e) = rec.finish(&st.config.runs_dir()) {
                log::warn!("run manifest: {e}");
            }
            *task_slot.session.lock().expect("session lock") = s;
        }
        task_slot.finish(&outcome);
        outcome
    });
    if background {
        let body = Accepted { session: id, status: JobStatus::Running.as_str().into() };
        return Ok((StatusCode::ACCEPTED, Json(body)).into_response());
    }
    task.await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))??;
    session_view(&slot).map(|v| Json(v).into_response())
}

fn session_view(slot: &SessionSlot) -> ApiResult<SessionView> {
    let (status, error, _) = slot.status();
    Ok(SessionView::new(&slot.snapshot(), status.as_str(), error)?)
}

pub async fn manipulate(State(st): State<Arc<AppState>>, b: Body<ManipulateRequest>) -> ApiResult<Response> {
    let req = body(b)?;
    let m = st.models()?;
    let pcfg = st.pipeline(req.iterations)?;
    let strategy = st.registry.get(req.strategy.as_deref().unwrap_or("A"))?.name().to_string();
    let slot = resolve_session(&st, &m, req.session.as_deref(), req.image.as_deref())?;
    run_edit(st, m, slot, EditKind::Text { strategy }, req.text, pcfg, req.background).await
}

pub async fn roi_edit(State(st): State<Arc<AppState>>, b: Body<RoiEditRequest>) -> ApiResult<Response> {
    let req = body(b)?;
    let m = st.models()?;
    let pcfg = st.pipeline(req.iterations)?;
    let (v, h, w) = png_to_gray(&req.mask)?;
    let roi = mask_from_gray(&v, h, w, m.generator()?.resolution())?;
    if roi.count() == 0 {
        return Err(ApiError::bad_request("the mask selects no pixels"));
    }
    let slot = resolve_session(&st, &m, req.session.as_deref(), req.image.as_deref())?;
    run_edit(st, m, slot, EditKind::Roi { roi }, req.text, pcfg, req.background).await
}

fn resolve_code(m: &Models, input: &CodeInput) -> ApiResult<WCode> {
    let g = m.generator()?;
    match input {
        CodeInput::Code { code } => {
            let w = WCode::from_rows(code)?;
            w.check_shape(g.layers(), g.channels())?;
            Ok(w)
        }
        CodeInput::Image { image } => Ok(m.inversion()?.invert(&decode_image(m, image)?)?),
    }
}

pub async fn mix(State(st): State<Arc<AppState>>, b: Body<MixRequest>) -> ApiResult<Json<CodeResponse>> {
    let req = body(b)?;
    let m = st.models()?;
    blocking(move || {
        let (w_c, w_s) = (resolve_code(&m, &req.content)?, resolve_code(&m, &req.style)?);
        let layers: LayerSet = req.layers.iter().copied().collect();
        let w = style_mix(&w_c, &w_s, &layers)?;
        Ok(Json(CodeResponse::new(&w, &m.generator()?.synthesize(&w)?)?))
    })
    .await
}

pub async fn list_sessions(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<SessionSummary>>> {
    let mut out = Vec::new();
    for id in st.session_ids() {
        let slot = st.session(&id)?;
        let (status, _, _) = slot.status();
        let s = slot.snapshot();
        out.push(SessionSummary { id, edits: s.history().len(), status: status.as_str().into(), current_hash: s.current_hash() });
    }
    Ok(Json(out))
}

pub async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let slot = st.session(&id)?;
    session_view(&slot).map(Json)
}

pub async fn history(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<StepView>>> {
    let s = st.session(&id)?.snapshot();
    Ok(Json(s.history().iter().enumerate().map(|(i, st)| StepView::new(i, st)).collect()))
}

pub async fn trace(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<TraceResponse>> {
    let (status, _, trace) = st.session(&id)?.status();
    Ok(Json(TraceResponse { session: id, status: status.as_str().into(), trace }))
}

pub async fn cancel(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<CancelResponse>> {
    let slot = st.session(&id)?;
    if !slot.cancel() {
        return Err(ApiError::new(StatusCode::CONFLICT, "no edit is running in this session"));
    }
    Ok(Json(CancelResponse { session: id, cancelled: true }))
}

pub async fn replay(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ReplayResponse>> {
    let m = st.models()?;
    let slot = st.session(&id)?;
    let s = slot.snapshot();
    blocking(move || {
        let replayed = s.replay(&m, &st.registry)?;
        let recorded: Vec<String> = s.history().iter().map(|h| h.result_hash.clone()).collect();
        Ok(Json(ReplayResponse { session: id, matches: recorded == replayed, recorded, replayed }))
    })
    .await
}
