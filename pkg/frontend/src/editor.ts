/** Local-first edit session: applies polygon edits to an in-memory document,
 * keeps an undo stack of full snapshots, and tracks dirtiness against the
 * last-saved document (dirty is *derived*, so undoing back to the saved
 * state clears it). */

import type { AnnotationDocument, Point } from "./types.js";
import {
  addPolygon,
  cloneDoc,
  deleteElement,
  docsEqual,
  insertVertex,
  moveVertex,
} from "./doc.js";

export type EditAction =
  | { op: "add"; layer: string; points: Point[] }
  | { op: "delete"; elementId: string }
  | { op: "move-vertex"; elementId: string; vertexIndex: number; to: Point }
  | { op: "insert-vertex"; elementId: string; segmentIndex: number; at: Point };

export class EditorSession {
  private doc_: AnnotationDocument;
  private saved: AnnotationDocument;
  private undoStack: AnnotationDocument[] = [];
  selection: string | null = null;

  constructor(doc: AnnotationDocument) {
    this.doc_ = cloneDoc(doc);
    this.saved = cloneDoc(doc);
  }

  get doc(): AnnotationDocument {
    return this.doc_;
  }

  get revision(): number {
    return this.saved.revision;
  }

  get dirty(): boolean {
    return !docsEqual(this.doc_, this.saved);
  }

  get canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  /** Apply one edit; returns the new element id for "add" actions. */
  apply(action: EditAction): string | null {
    const before = this.doc_;
    let id: string | null = null;
    let next: AnnotationDocument;
    switch (action.op) {
      case "add": {
        const result = addPolygon(before, action.layer, action.points);
        next = result.doc;
        id = result.id;
        break;
      }
      case "delete":
        next = deleteElement(before, action.elementId);
        if (this.selection === action.elementId) this.selection = null;
        break;
      case "move-vertex":
        next = moveVertex(before, action.elementId, action.vertexIndex, action.to);
        break;
      case "insert-vertex":
        next = insertVertex(before, action.elementId, action.segmentIndex, action.at);
        break;
    }
    this.undoStack.push(before);
    this.doc_ = next;
    return id;
  }

  /** Restore the document as it was before the most recent edit. */
  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) return false;
    this.doc_ = prev;
    return true;
  }

  /** Adopt the server's post-save/reloaded document as the clean state. */
  markSaved(doc: AnnotationDocument): void {
    this.doc_ = cloneDoc(doc);
    this.saved = cloneDoc(doc);
    this.undoStack = [];
  }
}
