/** Browser entry point: canvas tile viewer with a polygon-overlay editor.
 * Server state changes only through "Save" (PUT annotations with If-Match)
 * and "Run segmentation" (POST /api/jobs); everything else is local. */

import { ApiClient, ConflictError, JobFailedError } from "./api.js";
import { pointInPolygon } from "./doc.js";
import { EditorSession } from "./editor.js";
import type { Point, SlideMeta } from "./types.js";
import {
  ViewerState,
  colorCss,
  fitSlide,
  screenToSlide,
  slideToScreen,
  visibleElements,
  visibleTiles,
  zoomAt,
} from "./viewer.js";

const TILE_RETRY_MS = 1500;
const HANDLE_PX = 5;

type TileEntry =
  | { state: "loading" }
  | { state: "ok"; img: HTMLImageElement }
  | { state: "error" };

class App {
  private api = new ApiClient("");
  private canvas: HTMLCanvasElement;
  private ctx: CanvasRenderingContext2D;
  private meta: SlideMeta | null = null;
  private view: ViewerState | null = null;
  private editor: EditorSession | null = null;
  private tiles = new Map<string, TileEntry>();
  private mode: "pan" | "draw" = "pan";
  private draft: Point[] = [];
  private drag: { kind: "pan" | "vertex"; vertexIndex?: number } | null = null;
  private saving = false;

  constructor() {
    this.canvas = document.getElementById("viewer") as HTMLCanvasElement;
    const ctx = this.canvas.getContext("2d");
    if (!ctx) throw new Error("canvas 2d context unavailable");
    this.ctx = ctx;
    this.bindUi();
    void this.refreshSlideList();
    new ResizeObserver(() => this.resize()).observe(this.canvas.parentElement!);
    this.resize();
  }

  // ----- DOM plumbing -------------------------------------------------------

  private el<T extends HTMLElement>(id: string): T {
    return document.getElementById(id) as T;
  }

  private status(text: string, isError = false): void {
    const bar = this.el<HTMLDivElement>("status");
    bar.textContent = text;
    bar.className = isError ? "error" : "";
  }

  private bindUi(): void {
    this.el<HTMLSelectElement>("slide-select").addEventListener("change", (e) => {
      const id = (e.target as HTMLSelectElement).value;
      if (id) void this.openSlide(id);
    });
    this.el<HTMLButtonElement>("reload-slides").addEventListener("click", () => {
      void this.refreshSlideList();
    });
    this.el<HTMLButtonElement>("save").addEventListener("click", () => {
      void this.save();
    });
    this.el<HTMLButtonElement>("submit-job").addEventListener("click", () => {
      void this.submitJob();
    });
    this.el<HTMLButtonElement>("draw").addEventListener("click", () => {
      this.mode = this.mode === "draw" ? "pan" : "draw";
      this.draft = [];
      this.el<HTMLButtonElement>("draw").classList.toggle("active", this.mode === "draw");
      this.render();
    });
    this.el<HTMLButtonElement>("delete").addEventListener("click", () => this.deleteSelection());
    this.el<HTMLButtonElement>("undo").addEventListener("click", () => this.undo());

    window.addEventListener("keydown", (e) => {
      if (e.key === "Escape") {
        this.draft = [];
        this.mode = "pan";
        this.render();
      } else if (e.key === "Delete" || e.key === "Backspace") {
        this.deleteSelection();
      } else if ((e.ctrlKey || e.metaKey) && e.key.toLowerCase() === "z") {
        e.preventDefault();
        this.undo();
      }
    });

    this.canvas.addEventListener("wheel", (e) => {
      if (!this.view || !this.meta) return;
      e.preventDefault();
      const r = this.canvas.getBoundingClientRect();
      const next = zoomAt(
        this.view, this.canvas.width, this.canvas.height,
        e.clientX - r.left, e.clientY - r.top,
        e.deltaY > 0 ? 0.25 : -0.25, this.meta.levels,
      );
      Object.assign(this.view, next);
      this.render();
    }, { passive: false });

    this.canvas.addEventListener("pointerdown", (e) => this.pointerDown(e));
    this.canvas.addEventListener("pointermove", (e) => this.pointerMove(e));
    this.canvas.addEventListener("pointerup", () => (this.drag = null));
    this.canvas.addEventListener("dblclick", (e) => this.doubleClick(e));
  }

  private resize(): void {
    const parent = this.canvas.parentElement!;
    this.canvas.width = parent.clientWidth;
    this.canvas.height = parent.clientHeight;
    this.render();
  }

  // ----- data loading -------------------------------------------------------

  private async refreshSlideList(): Promise<void> {
    try {
      const slides = await this.api.listSlides();
      const select = this.el<HTMLSelectElement>("slide-select");
      const current = select.value;
      select.innerHTML = "";
      select.append(new Option("choose a slide...", ""));
      for (const s of slides) {
        select.append(new Option(`${s.name} (${s.width0}x${s.height0})`, s.slide_id));
      }
      if (current) select.value = current;
      this.status(`${slides.length} slide(s) available`);
    } catch (err) {
      this.status(`cannot list slides: ${String(err)}`, true);
    }
  }

  private async openSlide(slideId: string): Promise<void> {
    this.meta = await this.api.getSlide(slideId);
    const doc = await this.api.getAnnotations(slideId);
    this.editor = new EditorSession(doc);
    this.tiles.clear();
    this.view = {
      slideId,
      ...fitSlide(this.meta, this.canvas.width, this.canvas.height),
      visibleLayers: new Set(doc.layers.map((l) => l.name)),
      selection: null,
    };
    this.rebuildLayerPanel();
    this.render();
    this.status(`loaded ${this.meta.name} at revision ${doc.revision}`);
  }

  private rebuildLayerPanel(): void {
    if (!this.editor || !this.view) return;
    const panel = this.el<HTMLDivElement>("layers");
    panel.innerHTML = "";
    for (const layer of this.editor.doc.layers) {
      const label = document.createElement("label");
      const box = document.createElement("input");
      box.type = "checkbox";
      box.checked = this.view.visibleLayers.has(layer.name);
      box.addEventListener("change", () => {
        if (box.checked) this.view!.visibleLayers.add(layer.name);
        else this.view!.visibleLayers.delete(layer.name);
        this.render(); // visibility only; no tile refetch
      });
      const swatch = document.createElement("span");
      swatch.className = "swatch";
      swatch.style.background = colorCss(layer.line_color);
      label.append(box, swatch, ` ${layer.name} (${layer.elements.length})`);
      panel.append(label);
    }
  }

  // ----- editing ------------------------------------------------------------

  private targetLayerName(): string {
    const doc = this.editor!.doc;
    const first = doc.layers[0];
    return first ? first.name : "annotations";
  }

  private pointerDown(e: PointerEvent): void {
    if (!this.view || !this.editor || !this.meta) return;
    const r = this.canvas.getBoundingClientRect();
    const px = e.clientX - r.left;
    const py = e.clientY - r.top;
    const [sx, sy] = screenToSlide(this.view, this.canvas.width, this.canvas.height, px, py);

    if (this.mode === "draw") {
      this.draft.push([sx, sy]);
      this.render();
      return;
    }
    const handle = this.hitVertexHandle(px, py);
    if (handle !== null) {
      this.drag = { kind: "vertex", vertexIndex: handle };
      return;
    }
    if (e.altKey && this.view.selection) {
      const segment = this.nearestSegment(sx, sy);
      this.editor.apply({
        op: "insert-vertex",
        elementId: this.view.selection,
        segmentIndex: segment,
        at: [sx, sy],
      });
      this.render();
      this.status("vertex inserted (unsaved)");
      return;
    }
    this.view.selection = this.hitElement(sx, sy);
    this.editor.selection = this.view.selection;
    this.drag = { kind: "pan" };
    this.render();
  }

  private pointerMove(e: PointerEvent): void {
    if (!this.drag || !this.view) return;
    if (this.drag.kind === "pan") {
      const span = 2 ** this.view.zoom;
      this.view.centerX -= e.movementX * span;
      this.view.centerY -= e.movementY * span;
      this.render();
    } else if (this.drag.vertexIndex !== undefined && this.view.selection && this.editor) {
      const r = this.canvas.getBoundingClientRect();
      const [sx, sy] = screenToSlide(
        this.view, this.canvas.width, this.canvas.height,
        e.clientX - r.left, e.clientY - r.top,
      );
      this.editor.apply({
        op: "move-vertex",
        elementId: this.view.selection,
        vertexIndex: this.drag.vertexIndex,
        to: [sx, sy],
      });
      this.render();
    }
  }

  private doubleClick(e: PointerEvent | MouseEvent): void {
    if (this.mode !== "draw" || !this.editor) return;
    e.preventDefault();
    // the dblclick fired two extra pointerdowns at the same spot; drop them
    if (this.draft.length >= 2) this.draft = this.draft.slice(0, -2);
    if (this.draft.length < 3) {
      this.status("a polygon needs at least 3 vertices", true);
      return;
    }
    const id = this.editor.apply({
      op: "add",
      layer: this.targetLayerName(),
      points: this.draft,
    });
    this.draft = [];
    this.mode = "pan";
    this.el<HTMLButtonElement>("draw").classList.remove("active");
    if (this.view) this.view.selection = id;
    this.rebuildLayerPanel();
    this.render();
    this.status("polygon added (unsaved)");
  }

  private deleteSelection(): void {
    if (!this.view?.selection || !this.editor) return;
    this.editor.apply({ op: "delete", elementId: this.view.selection });
    this.view.selection = null;
    this.rebuildLayerPanel();
    this.render();
    this.status("element deleted (unsaved)");
  }

  private undo(): void {
    if (this.editor?.undo()) {
      this.view!.selection = null;
      this.rebuildLayerPanel();
      this.render();
      this.status("undone");
    }
  }

  private hitElement(sx: number, sy: number): string | null {
    if (!this.editor || !this.view) return null;
    const overlay = visibleElements(this.editor.doc, this.view.visibleLayers);
    for (let i = overlay.length - 1; i >= 0; i -= 1) {
      const item = overlay[i]!;
      if (pointInPolygon(item.element.points, sx, sy)) return item.element.id;
    }
    return null;
  }

  private hitVertexHandle(px: number, py: number): number | null {
    if (!this.view?.selection || !this.editor) return null;
    const { element } = this.findSelected();
    for (let i = 0; i < element.points.length; i += 1) {
      const [x, y] = element.points[i]!;
      const [hx, hy] = slideToScreen(this.view, this.canvas.width, this.canvas.height, x, y);
      if (Math.hypot(hx - px, hy - py) <= HANDLE_PX + 2) return i;
    }
    return null;
  }

  /** Index of the selected polygon's edge closest to (sx, sy). */
  private nearestSegment(sx: number, sy: number): number {
    const { points } = this.findSelected().element;
    let best = 0;
    let bestD = Infinity;
    for (let i = 0; i < points.length; i += 1) {
      const [ax, ay] = points[i]!;
      const [bx, by] = points[(i + 1) % points.length]!;
      const len2 = (bx - ax) ** 2 + (by - ay) ** 2;
      const t = len2 === 0 ? 0 : Math.min(1, Math.max(0,
        ((sx - ax) * (bx - ax) + (sy - ay) * (by - ay)) / len2));
      const d = Math.hypot(sx - (ax + t * (bx - ax)), sy - (ay + t * (by - ay)));
      if (d < bestD) {
        bestD = d;
        best = i;
      }
    }
    return best;
  }

  private findSelected() {
    const id = this.view!.selection!;
    for (const layer of this.editor!.doc.layers) {
      const element = layer.elements.find((el) => el.id === id);
      if (element) return { layer, element };
    }
    throw new Error("selection vanished");
  }

  // ----- server round trips -------------------------------------------------

  private async save(): Promise<void> {
    if (!this.editor || !this.view || this.saving) return;
    if (!this.editor.dirty) {
      this.status("nothing to save");
      return;
    }
    this.saving = true;
    try {
      const result = await this.api.putAnnotations(
        this.view.slideId, this.editor.doc.layers, this.editor.revision,
      );
      const fresh = await this.api.getAnnotations(this.view.slideId);
      this.editor.markSaved(fresh);
      this.rebuildLayerPanel();
      this.render();
      this.status(`saved revision ${result.revision}`);
    } catch (err) {
      if (err instanceof ConflictError) {
        const reload = window.confirm(
          "Save conflict: the annotations changed on the server. " +
          "Reload the server copy? (Cancel keeps your local edits.)",
        );
        if (reload) {
          this.editor.markSaved(err.current);
          this.rebuildLayerPanel();
          this.render();
          this.status(`reloaded server revision ${err.current.revision}`);
        } else {
          this.status("save conflicted; local edits kept unsaved", true);
        }
      } else {
        this.status(`save failed: ${String(err)}`, true);
      }
    } finally {
      this.saving = false;
    }
  }

  private async submitJob(): Promise<void> {
    if (!this.view || !this.editor) return;
    if (this.editor.dirty && !window.confirm(
      "You have unsaved edits; the finished job will reload annotations. Continue?",
    )) {
      return;
    }
    try {
      const job = await this.api.submitJob({ slide_id: this.view.slideId });
      this.status(`job ${job.job_id} queued`);
      const done = await this.api.pollJob(job.job_id, {
        onProgress: (j) => {
          this.status(`job ${j.state}: ${j.progress.done}/${j.progress.total} tiles`);
        },
      });
      const fresh = await this.api.getAnnotations(this.view.slideId);
      for (const layer of fresh.layers) this.view.visibleLayers.add(layer.name);
      this.editor.markSaved(fresh);
      this.rebuildLayerPanel();
      this.render();
      this.status(
        `job done in ${done.timing ? done.timing["wall_seconds"]?.toFixed(1) : "?"}s; ` +
        `annotations at revision ${fresh.revision}`,
      );
    } catch (err) {
      if (err instanceof JobFailedError) {
        this.status(`job failed: ${err.message}`, true);
      } else {
        this.status(`job error: ${String(err)}`, true);
      }
    }
  }

  // ----- rendering ----------------------------------------------------------

  private tileEntry(level: number, x: number, y: number): TileEntry {
    const key = `${level}/${x}/${y}`;
    const hit = this.tiles.get(key);
    if (hit) return hit;
    const entry: TileEntry = { state: "loading" };
    this.tiles.set(key, entry);
    const img = new Image();
    img.onload = () => {
      this.tiles.set(key, { state: "ok", img });
      this.render();
    };
    img.onerror = () => {
      this.tiles.set(key, { state: "error" });
      this.render();
      setTimeout(() => {       // retry: forget the failure and refetch
        if (this.tiles.get(key)?.state === "error") {
          this.tiles.delete(key);
          this.render();
        }
      }, TILE_RETRY_MS);
    };
    img.src = this.api.tileUrl(this.view!.slideId, level, x, y);
    return entry;
  }

  private render(): void {
    const { ctx, canvas } = this;
    ctx.fillStyle = "#202228";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    if (!this.view || !this.meta || !this.editor) return;

    for (const t of visibleTiles(this.meta, this.view, canvas.width, canvas.height)) {
      const span = this.meta.tile_size * 2 ** t.level;
      const [dx, dy] = slideToScreen(
        this.view, canvas.width, canvas.height, t.x * span, t.y * span,
      );
      const edge = this.meta.tile_size * 2 ** (t.level - this.view.zoom);
      const entry = this.tileEntry(t.level, t.x, t.y);
      if (entry.state === "ok") {
        ctx.drawImage(entry.img, dx, dy, edge, edge);
      } else {
        ctx.fillStyle = entry.state === "error" ? "#4a3030" : "#2e3138";
        ctx.fillRect(dx, dy, edge, edge);
      }
    }

    for (const item of visibleElements(this.editor.doc, this.view.visibleLayers)) {
      const selected = item.element.id === this.view.selection;
      ctx.strokeStyle = colorCss(item.layer.line_color);
      ctx.lineWidth = selected ? 3 : 1.5;
      ctx.setLineDash(item.predicted ? [6, 4] : []);
      for (const ring of [item.element.points, ...item.element.holes]) {
        this.tracePath(ring);
        ctx.stroke();
      }
      if (selected) this.drawHandles(item.element.points);
    }
    ctx.setLineDash([]);

    if (this.draft.length > 0) {
      ctx.strokeStyle = "#ffd24a";
      ctx.lineWidth = 1.5;
      this.tracePath(this.draft, false);
      ctx.stroke();
      this.drawHandles(this.draft);
    }

    this.el<HTMLButtonElement>("save").disabled = !this.editor.dirty;
    this.el<HTMLSpanElement>("dirty").textContent = this.editor.dirty
      ? `revision ${this.editor.revision} + unsaved edits`
      : `revision ${this.editor.revision}`;
  }

  private tracePath(ring: Point[], close = true): void {
    const { ctx, canvas } = this;
    ctx.beginPath();
    ring.forEach(([x, y], i) => {
      const [px, py] = slideToScreen(this.view!, canvas.width, canvas.height, x, y);
      if (i === 0) ctx.moveTo(px, py);
      else ctx.lineTo(px, py);
    });
    if (close) ctx.closePath();
  }

  private drawHandles(ring: Point[]): void {
    const { ctx, canvas } = this;
    ctx.fillStyle = "#ffffff";
    for (const [x, y] of ring) {
      const [px, py] = slideToScreen(this.view!, canvas.width, canvas.height, x, y);
      ctx.fillRect(px - HANDLE_PX / 2, py - HANDLE_PX / 2, HANDLE_PX, HANDLE_PX);
    }
  }
}

new App();
